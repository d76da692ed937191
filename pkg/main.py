"""
Continual Unlearning Platform - Main Entry Point
Concept-aware continual unlearning experiments from the command line
"""

# Import and run the main application from the core module
from core.app import main

if __name__ == "__main__":
    main()
