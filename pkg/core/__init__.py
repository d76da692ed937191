# Command-line application
