"""python -m app → draft-lab CLI"""

import sys

from app.cli import main

sys.exit(main())
