# Evaluation module
