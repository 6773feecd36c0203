"""Two-stage scan classifier: convolutional embedding, bidirectional
recurrent scan model, phantom data, cross-validated training and the
ROC/DeLong/CAM evaluation machinery."""

__version__ = "0.1.0"
