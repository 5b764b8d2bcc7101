# CLI module - argparse command surface and error handling
