from kdsde.components.exceptions import *
from kdsde.components.status import *
from kdsde.components.rng import *
from kdsde.components.geometry import *
from kdsde.components.measures import *
from kdsde.components.transport import *
from kdsde.components.expressions import *
from kdsde.components.killed_sde import *
from kdsde.components.oracles import *
from kdsde.components.picard import *
from kdsde.components.coupling import *
from kdsde.components.girsanov import *
from kdsde.components.config import *
from kdsde.components.acceptance import *
from kdsde.components.handlers import *
