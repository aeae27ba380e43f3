"""Training, inference, evaluation and ablation on rendered phantoms."""
