import sys

from acmil.main import main

sys.exit(main())
