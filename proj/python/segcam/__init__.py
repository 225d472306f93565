"""Seg-Grad-CAM workbench: miniature U-Net, synthetic shapes and heatmaps."""

from ._core import (
    Model,
    class_names,
    colorize_overlay,
    generate,
    gradcheck,
    read_pgm,
    read_ppm,
    write_dataset,
    write_pgm,
    write_ppm,
)

__all__ = [
    "Model",
    "class_names",
    "colorize_overlay",
    "generate",
    "gradcheck",
    "read_pgm",
    "read_ppm",
    "write_dataset",
    "write_pgm",
    "write_ppm",
]
