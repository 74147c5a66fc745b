"""Command-line driver, fuzzing campaign and mixed-workload benchmark."""
