# Services module - Training, experiment and analysis logic
