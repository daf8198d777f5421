import sys

from src.cli.commands import main as run_cli


def main():
    sys.exit(run_cli())


if __name__ == '__main__':
    main()
