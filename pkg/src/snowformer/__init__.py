"""Single-image desnowing: synthetic data, transformer model, training, inference.

Submodules:
  tensor     numpy-backed tensors with reverse-mode autodiff
  gradcheck  finite-difference gradient verification
  synth      physics-based synthetic snow scene generation
  model      the encoder / latent transformer / decoder / refinement network
  training   losses, Adam, LR schedule, augmentation, training loop
  checkpoint binary tensor checkpoint format
  tiling     overlapped-tile inference
  metrics    PSNR / SSIM and dataset evaluation
  cli        command-line entry points
"""

__version__ = "0.1.0"
