# Repositories module - Datasets, checkpoints, run records and metric streams
