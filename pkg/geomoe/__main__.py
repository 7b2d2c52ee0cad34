"""Allow ``python -m geomoe``."""
from .cli import main

raise SystemExit(main())
