"""File formats: packed datasets, checkpoints and run reports."""
