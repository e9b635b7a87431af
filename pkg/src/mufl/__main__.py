"""Main entry point for the MuFL simulator."""

from .cli import app


def main():
    app()


if __name__ == "__main__":
    main()
