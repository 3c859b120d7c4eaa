"""Knowledge distillation for compact fine-grained classifiers."""
