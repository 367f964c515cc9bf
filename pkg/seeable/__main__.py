import sys

from .api.commands import main

sys.exit(main())
