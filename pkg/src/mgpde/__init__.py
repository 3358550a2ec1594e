"""Neural full-field Poisson solvers trained with a variational loss on multigrid schedules."""

from .fem import assemble, fem_solution, solve_cg
from .mgtrain import DatasetSpec, EarlyStop, Schedule, make_schedule, run, speedup_report
from .network import UNetSpec, adapt, build, forward, load_checkpoint, save_checkpoint
from .parallel import ClusterSpec, allreduce_average, partition, sync_bn, train_epoch
from .problem import GridSpec, apply_bc, diffusivity_field, energy_loss, sample_omegas
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"
