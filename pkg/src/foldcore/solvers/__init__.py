"""Forward solvers, their differentiable steps, and folded-layer factories."""

from .pgd import Constant, GradModel, Polyak, pgd_solve
from .qp import AdmmResult, QpProblem, admm_qp_solve, make_admm_step
from .fdpg import fdpg_solve, fdpg_step
from .sqp import NlpProblem, sqp_solve, sqp_step
from .layers import (
    LayerMap,
    Oracle,
    ParamQp,
    folded_admm_projection,
    layer_grad,
    layer_output,
    make_layer_ffdpg,
    make_layer_fpgda,
    make_layer_fpgdb,
    make_layer_fsqp,
    multistart,
    polyhedron_projection_step,
)

__all__ = [
    "AdmmResult",
    "Constant",
    "GradModel",
    "LayerMap",
    "NlpProblem",
    "Oracle",
    "ParamQp",
    "Polyak",
    "QpProblem",
    "admm_qp_solve",
    "fdpg_solve",
    "fdpg_step",
    "folded_admm_projection",
    "layer_grad",
    "layer_output",
    "make_admm_step",
    "make_layer_ffdpg",
    "make_layer_fpgda",
    "make_layer_fpgdb",
    "make_layer_fsqp",
    "multistart",
    "pgd_solve",
    "polyhedron_projection_step",
    "sqp_solve",
    "sqp_step",
]
