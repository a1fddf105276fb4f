from .helper import *
from .chemio import *
from .fingerprint import *
from .geograph import *
from .datasplit import *
from .difftrain import *
from .equinet import *
from .difftrain.trainer import *
from .physscore import *
from .metrics import *

VERSION = (0, 1, 0)

__version__ = ".".join([str(x) for x in VERSION])
