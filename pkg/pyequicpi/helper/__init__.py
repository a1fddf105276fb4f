from .logging_service import *
from .errors import *
from .settings import *

VERSION = (0, 1, 0)

__version__ = ".".join([str(x) for x in VERSION])
