"""Entry point for python -m aepo_desk."""

from aepo_desk.cli import main

if __name__ == "__main__":
    main()
