"""Build shim: the project manifest lives at src/setup.py (packages are imported as ``src.*``)."""
import runpy
from pathlib import Path

runpy.run_path(str(Path(__file__).resolve().parent / 'src' / 'setup.py'))
