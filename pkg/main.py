# Runs the same entry point as the ``pyequicpi`` console script.
from pyequicpi.cli import main

if __name__ == "__main__":
    main()
