# Command modules - one module per command group
