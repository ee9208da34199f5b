"""imshield: image immunization for tamper localization and self-recovery.

The library embeds imperceptible recovery information into images with an
invertible network; after tampering and benign post-processing, a detector
localizes the tampered region and the inverse pass reconstructs the original
content there.
"""

__version__ = "0.1.0"
