__title__ = "capsattack"
__license__ = "MIT"
__version__ = "0.1.0"

from .enums import *
from .errors import *
from .config import *
from .tensor import *
from .capsnet import *
from .baselines import *
from .reconstruction import *
from .models import *
from .attacks import *
from .data import *
from .training import *
from .checkpoint import *
from .analysis import *
from .utils import setup_logging
