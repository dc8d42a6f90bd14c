import sys

from raqr.cli import main

sys.exit(main())
