"""Cross-modality adapter fine-tuning for dual-stream ViT glioma segmentation."""

__version__ = "0.1.0"
