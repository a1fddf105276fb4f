from pyequicpi.equinet.irreps import *
from pyequicpi.equinet.layers import *
from pyequicpi.equinet.model import *
