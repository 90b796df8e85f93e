"""Neural-network and linear-algebra kernel."""

from ._backend import BACKEND
from .curvature import CurvatureProbe, hvp, model_hessian
from .linalg import (
    DEFAULT_HESSIAN_CAP,
    HessianTooLarge,
    NotConverged,
    hessian_fd,
    matrix_rank,
    singular_values,
    sym_eigenvalues,
)
from .model import (
    Conv2D,
    Dense,
    Flatten,
    ForwardResult,
    Model,
    feature_maps,
    ReLU,
    ShapeError,
    backward,
    flatten_params,
    forward,
    init_model,
    load_model,
    logits,
    loss_and_grad,
    model_from_dict,
    model_to_dict,
    parameter_count,
    save_model,
    sgd_step,
    unflatten_params,
)
from .objectives import CubicObjective, ModelObjective, QuadraticObjective


def hessian(model, x, y, cap=DEFAULT_HESSIAN_CAP, method="exact"):
    """Hessian of the mean loss of ``model`` over ``(x, y)`` at its current weights.

    ``method="exact"`` uses R-operator products (ReLU masks held fixed);
    ``method="fd"`` differentiates the analytic gradient numerically.
    """
    if method == "exact":
        return model_hessian(model, x, y, cap)
    if method == "fd":
        obj = ModelObjective(model, x, y)
        return hessian_fd(obj.gradient, obj.initial_params(), cap)
    raise ValueError(f"unknown Hessian method {method!r}")


__all__ = [
    "BACKEND",
    "Conv2D",
    "CubicObjective",
    "CurvatureProbe",
    "DEFAULT_HESSIAN_CAP",
    "Dense",
    "Flatten",
    "ForwardResult",
    "HessianTooLarge",
    "Model",
    "ModelObjective",
    "NotConverged",
    "QuadraticObjective",
    "ReLU",
    "ShapeError",
    "backward",
    "flatten_params",
    "feature_maps",
    "forward",
    "hessian",
    "hessian_fd",
    "hvp",
    "model_hessian",
    "init_model",
    "load_model",
    "logits",
    "loss_and_grad",
    "matrix_rank",
    "model_from_dict",
    "model_to_dict",
    "parameter_count",
    "save_model",
    "sgd_step",
    "singular_values",
    "sym_eigenvalues",
    "unflatten_params",
]
