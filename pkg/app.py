"""
Reference-guided MRI super-resolution at desk scale
Command line entry point: python app.py <subcommand> [options]
"""

import sys

from dotenv import load_dotenv

from modules.cli import run_command

# Load environment variables (FASR_LOG_LEVEL)
load_dotenv()


def main() -> int:
    return run_command(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
