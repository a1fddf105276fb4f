from pyequicpi.difftrain.tape import *
from pyequicpi.difftrain.params import *
from pyequicpi.difftrain.optim import *
from pyequicpi.difftrain.checkpoint import *
