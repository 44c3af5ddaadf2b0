"""deformable image registration with Langevin-sampled UNet weights."""
from __future__ import absolute_import

__author__ = 'Various'
__author_email__ = ''
__license__ = 'BSD-3-Clause'
__url__ = ''
__version__ = '0.1.0'

from .core import *

from . import tensor
from . import ops
from . import gradcheck
from . import warp
from . import unet
from . import losses
from . import asgld
from . import posterior
from . import idx
from . import checkpoint
from . import pgm
from . import dataset
from . import evaluate
from . import config
