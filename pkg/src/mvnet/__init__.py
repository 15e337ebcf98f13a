"""Point-cloud pre-training through projected 2D distillation and multi-view correspondence."""

