"""Guided thermal image super-resolution toolkit.

Library layout:

- ``tensor``    reverse-mode autodiff core (numpy-backed)
- ``resample``  Keys bicubic resizing (skip path, synthetic degradation)
- ``swin``      window partitioning, shifted-window (cross-)attention blocks
- ``model``     two-branch fusion super-resolution network
- ``metrics``   training losses, PSNR/SSIM
- ``data``      datasets, patches, augmentation, guide dropout, synthesis
- ``training``  Adam, training loop, evaluation, checkpoints
- ``cli``       command-line front end (``sfsr`` entry point)
"""

__version__ = "0.1.0"
