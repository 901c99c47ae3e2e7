"""Structure features of label volumes and model cost accounting."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import ops
from .autodiff import Tensor
from .models import SegmentationModel

# 26-connectivity: any of the 3x3x3 neighbours joins two voxels.
_CONNECTIVITY = np.ones((3, 3, 3), dtype=int)


def _as_volumes(label_volumes) -> list[np.ndarray]:
    vols = [np.asarray(v) for v in label_volumes]
    if not vols:
        raise ValueError("need at least one label volume")
    for v in vols:
        if v.ndim != 3:
            raise ValueError(f"label volumes must be 3D, got shape {v.shape}")
    return vols


def connected_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 26-connected regions of a boolean mask."""
    labeled, count = ndimage.label(mask, structure=_CONNECTIVITY)
    return labeled, int(count)


def structure_depth(label_volumes, class_id: int, printed_form: bool = False) -> float:
    """Mean axial extent, in slices, of the connected regions of a class.

    Per volume the region extents are averaged, then the per-volume values
    are averaged. ``printed_form`` switches the per-volume denominator to
    the sum of the region indices 1..R instead of the region count; the
    two readings agree whenever every volume holds a single region.
    """
    vols = _as_volumes(label_volumes)
    per_patient = []
    for v in vols:
        mask = v == class_id
        if not mask.any():
            continue
        labeled, count = connected_regions(mask)
        depths = []
        for r in range(1, count + 1):
            zs = np.unique(np.nonzero(labeled == r)[2])
            depths.append(int(zs.max()) - int(zs.min()) + 1)
        denom = count * (count + 1) / 2.0 if printed_form else float(count)
        per_patient.append(sum(depths) / denom)
    if not per_patient:
        raise ValueError(f"class {class_id} absent from every volume")
    return float(np.mean(per_patient))


def structure_size(label_volumes, class_id: int) -> float:
    """Mean fraction of the volume occupied by a class."""
    vols = _as_volumes(label_volumes)
    shape = vols[0].shape
    for v in vols:
        if v.shape != shape:
            raise ValueError("structure_size expects volumes of identical shape")
    total = sum(int((v == class_id).sum()) for v in vols)
    return total / (len(vols) * float(np.prod(shape)))


def _slice_centroids(mask: np.ndarray) -> dict[int, np.ndarray]:
    out = {}
    for z in range(mask.shape[2]):
        ii, jj = np.nonzero(mask[:, :, z])
        if ii.size:
            out[z] = np.array([ii.mean(), jj.mean()])
    return out


def structure_displacement(label_volumes, class_id: int) -> float:
    """Mean in-plane centroid travel between consecutive slices.

    For every volume, each slice pair (s-1, s) in which the class appears
    in both slices contributes the Euclidean distance between the two
    in-plane centroids; the total is divided by volumes * slices-per-volume.
    """
    vols = _as_volumes(label_volumes)
    depth = vols[0].shape[2]
    for v in vols:
        if v.shape[2] != depth:
            raise ValueError("structure_displacement expects equal volume depths")
    total = 0.0
    pairs = 0
    for v in vols:
        cents = _slice_centroids(v == class_id)
        for z in range(1, depth):
            if z in cents and z - 1 in cents:
                total += float(np.linalg.norm(cents[z - 1] - cents[z]))
                pairs += 1
    if pairs == 0:
        raise ValueError(f"class {class_id} never appears in two consecutive slices")
    return total / (len(vols) * depth)


def class_feature_table(label_volumes, num_classes: int,
                        printed_depth_form: bool = False) -> list[dict]:
    """Per-foreground-class depth, size fraction and displacement."""
    rows = []
    for k in range(1, num_classes):
        rows.append({
            "class_id": k,
            "depth": structure_depth(label_volumes, k, printed_form=printed_depth_form),
            "size_fraction": structure_size(label_volumes, k),
            "displacement": structure_displacement(label_volumes, k),
        })
    return rows


# ---------------------------------------------------------------------------
# model cost accounting

# FLOP convention: one multiply-accumulate counts as two floating point
# operations, and only convolution-type layers (including 1x1 output convs
# and transposed convs) are counted; normalisation, activations, pooling
# and interpolation are excluded.
FLOPS_PER_MAC = 2
BYTES_PER_VALUE = 8  # float64


def count_params(model: SegmentationModel) -> int:
    """Exact number of trainable scalars."""
    return sum(t.data.size for t in model.parameters().values())


def _model_input_shape(model: SegmentationModel, in_plane: tuple[int, int]) -> tuple[int, ...]:
    h, w = in_plane
    spec = model.spec
    if spec.mode == "end2end_2d":
        return (1, h, w, spec.in_channels)
    return (1, h, w, spec.d, spec.in_channels)


def _traced_forward(model: SegmentationModel, in_plane: tuple[int, int]) -> list[ops.OpCost]:
    x = Tensor(np.zeros(_model_input_shape(model, in_plane)))
    records: list[ops.OpCost] = []
    with ops.cost_trace(records):
        model.forward(x, training=False)
    return records


def count_flops(model: SegmentationModel, in_plane: tuple[int, int]) -> int:
    """Forward-pass floating point operations for a single input at the
    given in-plane size, under the 2-FLOPs-per-MAC convention."""
    return sum(FLOPS_PER_MAC * r.macs for r in _traced_forward(model, in_plane))


def estimate_activation_memory(model: SegmentationModel, in_plane: tuple[int, int]) -> int:
    """Analytic bytes held by one forward pass: every traced layer output
    (convolutions, pooling, unpooling, interpolation, normalisation) plus
    the input plus the parameters, at 8 bytes per value."""
    records = _traced_forward(model, in_plane)
    acts = sum(r.out_elements for r in records)
    inp = int(np.prod(_model_input_shape(model, in_plane)))
    return BYTES_PER_VALUE * (acts + inp + count_params(model))


@dataclass
class CostReport:
    parameter_count: int
    flop_count: int
    activation_memory_bytes: int
    seconds_per_training_step: float = float("nan")
    seconds_per_prediction: float = float("nan")


def cost_report(model: SegmentationModel, in_plane: tuple[int, int],
                timing_batch=None, loss_fn=None) -> CostReport:
    """Static cost numbers plus optional wall-clock timing of one training
    step and one single-sample prediction on a caller-supplied batch."""
    report = CostReport(parameter_count=count_params(model),
                        flop_count=count_flops(model, in_plane),
                        activation_memory_bytes=estimate_activation_memory(model, in_plane))
    if timing_batch is not None:
        from .autodiff import backward
        from .training import AdamState, adam_step

        x, y = timing_batch
        params = model.parameters()
        state = AdamState(params)
        t0 = time.perf_counter()
        for p in params.values():
            p.grad = None
        loss = loss_fn(model.forward(Tensor(x), training=True), y)
        backward(loss)
        adam_step(params, state, 1e-4)
        report.seconds_per_training_step = time.perf_counter() - t0
        t0 = time.perf_counter()
        model.forward(Tensor(x[:1]), training=False)
        report.seconds_per_prediction = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------------------
# result aggregation


def aggregate_results(fold_rows: list[dict], expected_cells: list[tuple] | None = None) -> list[dict]:
    """Collapse per-fold scores into one row per experiment cell.

    ``fold_rows`` entries need mode, backbone, d and mean_dsc keys. Rows
    are grouped by (mode, backbone, d) and reduced to mean and population
    standard deviation. With ``expected_cells`` given, every expected cell
    must be present or a ValueError is raised.
    """
    groups: dict[tuple, list[float]] = {}
    for row in fold_rows:
        key = (row["mode"], row["backbone"], int(row["d"]))
        groups.setdefault(key, []).append(float(row["mean_dsc"]))
    if expected_cells is not None:
        missing = [c for c in expected_cells if tuple(c) not in groups]
        if missing:
            raise ValueError(f"aggregate is missing cells: {missing}")
        keys = [tuple(c) for c in expected_cells]
    else:
        keys = sorted(groups)
    out = []
    for key in keys:
        scores = groups[key]
        out.append({
            "mode": key[0], "backbone": key[1], "d": key[2],
            "folds": len(scores),
            "mean_dsc": float(np.mean(scores)),
            "std_dsc": float(np.std(scores)),
        })
    return out


def aggregate_table_lines(rows: list[dict]) -> list[str]:
    lines = ["mode,backbone,d,folds,mean_dsc,std_dsc"]
    for r in rows:
        lines.append(f"{r['mode']},{r['backbone']},{r['d']},{r['folds']},"
                     f"{r['mean_dsc']!r},{r['std_dsc']!r}")
    return lines
