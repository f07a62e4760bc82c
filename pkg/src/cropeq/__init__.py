"""Crop-and-resize equivariance tooling for dense predictors.

The package provides the geometry of continuous crop windows with exact
adjoint splatting, an equivariant averaging operator with a normalized
self-consistency loss, a small trainable dense predictor with hand-written
gradients, equivariance audit metrics, a synthetic scene generator, desk
scale training loops, and a command line front end.

Heavy submodules load lazily so that ``import cropeq`` itself stays
numpy-free; the command line relies on this to pin BLAS thread counts
before numpy initializes.
"""

from .errors import CropEqError

__version__ = "0.1.0"

_EXPORTS = {
    "geometry": [
        "ColorJitterParams", "CropSampler", "CropTransform", "DenseMap",
        "JitterFactors", "Semantics", "apply", "color_jitter", "compose",
        "cosine_window", "identity_transform", "inverse_splat",
        "jitter_apply", "sample_transform", "scale_transform",
    ],
    "equivariance": [
        "EquivariantAverage", "EqLossResult", "LinearPredictorHead",
        "equivariant_average", "equivariant_loss", "exact_average_discrete",
        "predict_tta", "total_loss",
    ],
    "model": [
        "PredictorNet", "PredictorNetConfig", "load_checkpoint",
        "predictor_fn", "save_checkpoint",
    ],
    "metrics": [
        "AlignmentCoeffs", "EqErrStats", "MetricRow", "absrel",
        "aligned_depth", "aligned_depth_absrel", "angular_error",
        "delta_gt", "eqerr_depth", "eqerr_depth_map", "eqerr_distribution",
        "l1_error", "lsq_align", "read_metrics_csv", "write_metrics_csv",
    ],
    "data": [
        "DatasetManifest", "SceneSample", "build_dataset", "gen_scene",
        "load_rgb_only", "load_scene_maps", "read_manifest", "read_map",
        "write_manifest", "write_map",
    ],
    "training": [
        "TrainConfig", "TrainResult", "adamw_step", "cosine_lr",
        "finetune_unsupervised", "load_train_config", "train",
        "validation_eqloss",
    ],
}

_LOOKUP = {
    name: module for module, names in _EXPORTS.items() for name in names
}

__all__ = sorted(["CropEqError", "__version__", *_LOOKUP])


def __getattr__(name):
    try:
        module = _LOOKUP[name]
    except KeyError:
        raise AttributeError(
            f"module {__name__!r} has no attribute {name!r}"
        ) from None
    import importlib

    value = getattr(importlib.import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return __all__
