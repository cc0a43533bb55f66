"""
Analytical time and memory estimates.

Time is the closed-form count of every arithmetic operation needed for training, per layer,
multiplied by a per-op cost. Narrow (12-bit) schemes pack `simd_ratio` operations into one
wide operation. Rounding overhead and memory traffic are not modelled.
"""
import json
import logging
import os
from typing import Dict, List, Optional

from lpnum.common.errors import CostTableError
from lpnum.common.models import OP_KINDS, OpTally
from lpnum.common.network import LayerKind, SchemeConfig, Topology, build_topology, valid_taps
from lpnum.common.context import ParameterClass
from lpnum.common.qformats import FixedFormat

logger = logging.getLogger("rich")

DEFAULT_COST_TABLE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "resources",
                                  "calibration.json")
WIDE_BITS = 32
COST_KEYS = ("float_mul", "float_add", "fixed_mul", "fixed_add", "shift", "cmp", "fixed_scale_adjust",
             "float_scale_adjust")
REFERENCE_MEGABYTES = 12.702


class CostTable:

    def __init__(self, costs: Dict[str, float], simd_ratio: float = 32 / 12, source: str = None,
                 activation_images: int = 1, reference_megabytes: Dict[str, float] = None):
        self.costs = dict(costs)
        self.simd_ratio = simd_ratio
        self.source = source
        self.activation_images = activation_images
        self.reference_megabytes = dict(reference_megabytes or {})

    def cost(self, key: str) -> float:
        if key not in self.costs:
            raise CostTableError(entry=key, source=self.source)
        return float(self.costs[key])

    def scaled(self, factor: float) -> "CostTable":
        return CostTable({k: v * factor for k, v in self.costs.items()}, self.simd_ratio, self.source,
                         self.activation_images, self.reference_megabytes)


def load_cost_table(path: Optional[str] = None) -> CostTable:
    path = path or DEFAULT_COST_TABLE
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except (OSError, ValueError) as e:
        raise CostTableError(entry="<file>", source=f"{path} ({e})")
    if "costs" not in raw:
        raise CostTableError(entry="costs", source=path)
    memory = raw.get("memory", {})
    try:
        activation_images = int(memory.get("activation_images", 1))
        reference = {name: float(mb) for name, mb in memory.get("reference_megabytes", {}).items()}
    except (TypeError, ValueError, AttributeError):
        raise CostTableError(entry="memory", source=path)
    if activation_images < 1:
        raise CostTableError(entry="memory.activation_images", source=path)
    table = CostTable(raw["costs"], float(raw.get("simd_ratio", 32 / 12)), path, activation_images, reference)
    for key in COST_KEYS:
        table.cost(key)
    return table


PHASES = ("forward", "bias", "weight_gradient", "bias_gradient", "error_propagation", "update")


def phase_ops(topology: Topology, layer_name: str, b: int, pot: bool = False,
              pot_hyperparameters: bool = False, contexts: bool = False) -> Dict[str, OpTally]:
    """
    Closed-form op counts of one layer for one batch of `b` images, split by phase. Under the
    power-of-two scheme the products of forward propagation, weight gradients and error
    propagation are shifts. With `contexts`, every product, bias add and update term combines
    operands of two contexts and costs one scale adjustment.
    """
    layer = next(lyr for lyr in topology.layers if lyr.name == layer_name)
    product = "shift" if pot else "mul"
    update_product = "shift" if pot_hyperparameters else "mul"
    adjust = 1 if contexts else 0
    first_param = next((lyr.name for lyr in topology.parametric), None)
    in_shape, out_shape = topology.shapes[layer.name]
    phases = {phase: OpTally() for phase in PHASES}
    out_size = 1
    for d in out_shape:
        out_size *= d
    if layer.kind == LayerKind.CONV:
        cin, h, w = in_shape
        cout, ho, wo = out_shape
        p, k = ho * wo, layer.fan_in
        o = cout * p
        phases["forward"].record(product, b * o * k)
        phases["forward"].record("scale_adjust", adjust * b * o * k)
        phases["forward"].record("add", b * o * (k - 1))
        phases["bias"].record("add", b * o)
        phases["bias"].record("scale_adjust", adjust * b * o)
        phases["weight_gradient"].record(product, b * o * k)
        phases["weight_gradient"].record("scale_adjust", adjust * b * o * k)
        phases["weight_gradient"].record("add", cout * k * (b * p - 1))
        phases["bias_gradient"].record("add", cout * (b * p - 1))
        if layer.name != first_param:
            taps = valid_taps(h, layer.kernel, layer.padding, layer.stride) * \
                valid_taps(w, layer.kernel, layer.padding, layer.stride)
            phases["error_propagation"].record(product, b * p * cout * k)
            phases["error_propagation"].record("scale_adjust", adjust * b * p * cout * k)
            phases["error_propagation"].record("add", b * p * k * (cout - 1) + b * cin * (taps - h * w))
        params = cout * k + cout
    elif layer.kind == LayerKind.FC:
        n_in, n_out = layer.in_channels, layer.out_channels
        phases["forward"].record(product, b * n_out * n_in)
        phases["forward"].record("scale_adjust", adjust * b * n_out * n_in)
        phases["forward"].record("add", b * n_out * (n_in - 1))
        phases["bias"].record("add", b * n_out)
        phases["bias"].record("scale_adjust", adjust * b * n_out)
        phases["weight_gradient"].record(product, b * n_out * n_in)
        phases["weight_gradient"].record("scale_adjust", adjust * b * n_out * n_in)
        phases["weight_gradient"].record("add", n_out * n_in * (b - 1))
        phases["bias_gradient"].record("add", n_out * (b - 1))
        if layer.name != first_param:
            phases["error_propagation"].record(product, b * n_in * n_out)
            phases["error_propagation"].record("scale_adjust", adjust * b * n_in * n_out)
            phases["error_propagation"].record("add", b * n_in * (n_out - 1))
        params = n_out * n_in + n_out
    else:
        params = 0
        if layer.kind == LayerKind.MAXPOOL:
            phases["forward"].record("cmp", b * out_size * (layer.kernel * layer.kernel - 1))
        elif layer.kind in (LayerKind.RELU, LayerKind.DROPOUT):
            phases["forward"].record("cmp", b * out_size)
    phases["update"].record(update_product, 3 * params)
    phases["update"].record("add", 3 * params)
    phases["update"].record("scale_adjust", adjust * 3 * params)
    return phases


def _batch_ops(topology: Topology, scheme: SchemeConfig, b: int, pot_hyperparameters: bool) -> Dict[str, OpTally]:
    counts: Dict[str, OpTally] = {}
    for layer in topology.layers:
        t = OpTally()
        for phase in phase_ops(topology, layer.name, b, scheme.is_pot, pot_hyperparameters,
                               scheme.uses_contexts).values():
            t.merge(phase)
        counts[layer.name] = t
    return counts


def count_ops(topology: Topology, scheme: SchemeConfig, dataset_size: int = 50000, epochs: int = 40,
              batch_size: int = 100, pot_hyperparameters: bool = False) -> Dict[str, OpTally]:
    """
    Per-layer op tallies for training `epochs` epochs over `dataset_size` images (forward,
    backward and update; evaluation excluded).
    """
    full, rest = divmod(dataset_size, batch_size)
    totals = {layer.name: OpTally() for layer in topology.layers}
    if full:
        for name, t in _batch_ops(topology, scheme, batch_size, pot_hyperparameters).items():
            totals[name].merge(t.scaled(full * epochs))
    if rest:
        for name, t in _batch_ops(topology, scheme, rest, pot_hyperparameters).items():
            totals[name].merge(t.scaled(epochs))
    return totals


def total_ops(counts: Dict[str, OpTally]) -> OpTally:
    total = OpTally()
    for t in counts.values():
        total.merge(t)
    return total


def scheme_family(scheme: SchemeConfig) -> str:
    return "fixed" if isinstance(scheme.spec(ParameterClass.WEIGHTS).base, FixedFormat) else "float"


def scheme_is_narrow(scheme: SchemeConfig) -> bool:
    return not scheme.spec(ParameterClass.WEIGHTS).is_wide


def op_costs(table: CostTable, scheme: SchemeConfig) -> Dict[str, float]:
    family = scheme_family(scheme)
    per_op = {
        "mul": table.cost(f"{family}_mul"),
        "add": table.cost(f"{family}_add"),
        "shift": table.cost("shift"),
        "cmp": table.cost("cmp"),
        "scale_adjust": table.cost(f"{family}_scale_adjust"),
    }
    if scheme_is_narrow(scheme):
        per_op = {k: v / table.simd_ratio for k, v in per_op.items()}
    return per_op


class TimeEstimate:
    def __init__(self, scheme: str, per_layer: Dict[str, float]):
        self.scheme = scheme
        self.per_layer = per_layer

    @property
    def seconds(self) -> float:
        return sum(self.per_layer.values())

    @property
    def hours(self) -> float:
        return self.seconds / 3600.0


def estimate_time(counts: Dict[str, OpTally], table: CostTable, scheme: SchemeConfig) -> TimeEstimate:
    per_op = op_costs(table, scheme)
    per_layer = {name: sum(t[kind] * per_op[kind] for kind in OP_KINDS) for name, t in counts.items()}
    return TimeEstimate(scheme.name, per_layer)


class MemoryEstimate:
    def __init__(self, scheme: str, per_layer: Dict[str, float], activation_images: int,
                 reference_megabytes: Optional[float] = None):
        self.scheme = scheme
        self.per_layer = per_layer
        self.activation_images = activation_images
        self.reference_megabytes = reference_megabytes

    @property
    def bytes(self) -> float:
        return sum(self.per_layer.values())

    @property
    def megabytes(self) -> float:
        return self.bytes / 1e6

    @property
    def reference_error(self) -> Optional[float]:
        """
        Relative deviation from the published figure for this scheme, when there is one.
        """
        if not self.reference_megabytes:
            return None
        return self.megabytes / self.reference_megabytes - 1.0


def class_bits(scheme: SchemeConfig, cls: ParameterClass) -> int:
    spec = scheme.spec(cls)
    return WIDE_BITS if spec.is_wide else spec.width


def structural_memory_counts(topology: Topology, activation_images: int = 1) -> Dict[str, Dict[str, int]]:
    """
    Values plus momentum buffers for every parameter, and one output and one gradient buffer
    holding `activation_images` images for every layer.
    """
    counts = {}
    for layer in topology.layers:
        _, out_shape = topology.shapes[layer.name]
        size = 1
        for d in out_shape:
            size *= d
        params = 0
        if layer.has_params:
            params = 2 * (layer.out_channels * layer.fan_in + layer.out_channels)
        if layer.kind == LayerKind.SOFTMAX_XENT:
            size = 0
        counts[layer.name] = {"parameters": params, "outputs": size * activation_images,
                              "gradients": size * activation_images}
    return counts


def fit_activation_images(topology: Topology, reference_megabytes: float = REFERENCE_MEGABYTES,
                          bits: int = WIDE_BITS) -> int:
    """
    Number of images held per signal buffer that brings a uniformly `bits`-wide scheme closest
    to `reference_megabytes`.
    """
    counts = structural_memory_counts(topology).values()
    params = sum(c["parameters"] for c in counts)
    signals = sum(c["outputs"] + c["gradients"] for c in counts)
    elements = reference_megabytes * 1e6 * 8 / bits
    return max(1, int(round((elements - params) / signals)))


def is_reference_topology(topology: Topology) -> bool:
    return topology.as_dict() == build_topology().as_dict()


def estimate_memory(topology: Topology, scheme: SchemeConfig, table: Optional[CostTable] = None) -> MemoryEstimate:
    activation_images = table.activation_images if table is not None else 1
    counts = structural_memory_counts(topology, activation_images)
    p_bits = class_bits(scheme, ParameterClass.WEIGHTS)
    o_bits = class_bits(scheme, ParameterClass.OUTPUTS)
    g_bits = class_bits(scheme, ParameterClass.GRADIENTS)
    per_layer = {name: (c["parameters"] * p_bits + c["outputs"] * o_bits + c["gradients"] * g_bits) / 8.0
                 for name, c in counts.items()}
    reference = None
    if table is not None and not scheme.overrides and is_reference_topology(topology):
        reference = table.reference_megabytes.get(scheme.name)
    estimate = MemoryEstimate(scheme.name, per_layer, activation_images, reference)
    if estimate.reference_error is not None:
        logger.debug("%s memory %.3f MB, %+.1f%% from the reference %.3f MB", scheme.name, estimate.megabytes,
                     100 * estimate.reference_error, reference)
    return estimate


class CostReport:
    """
    Per-layer time and memory for one scheme, plus totals.
    """

    def __init__(self, time: TimeEstimate, memory: MemoryEstimate, counts: Dict[str, OpTally]):
        self.scheme = time.scheme
        self.time = time
        self.memory = memory
        self.counts = counts

    def rows(self) -> List[Dict]:
        layers = list(self.counts.keys()) + [n for n in self.memory.per_layer if n not in self.counts]
        rows = []
        for name in layers:
            t = self.counts.get(name, OpTally())
            rows.append({
                "scheme": self.scheme, "layer": name,
                **{kind: t[kind] for kind in OP_KINDS},
                "seconds": self.time.per_layer.get(name, 0.0),
                "bytes": self.memory.per_layer.get(name, 0.0),
            })
        total = total_ops(self.counts)
        rows.append({
            "scheme": self.scheme, "layer": "total",
            **{kind: total[kind] for kind in OP_KINDS},
            "seconds": self.time.seconds,
            "bytes": self.memory.bytes,
        })
        return rows

    def summary(self) -> Dict:
        return {"scheme": self.scheme, "hours": self.time.hours, "megabytes": self.memory.megabytes,
                "activation_images": self.memory.activation_images,
                "reference_megabytes": self.memory.reference_megabytes,
                "memory_error": self.memory.reference_error}


def cost_report(topology: Topology, scheme: SchemeConfig, table: CostTable, dataset_size: int = 50000,
                epochs: int = 40, batch_size: int = 100, pot_hyperparameters: bool = False) -> CostReport:
    counts = count_ops(topology, scheme, dataset_size, epochs, batch_size, pot_hyperparameters)
    return CostReport(estimate_time(counts, table, scheme), estimate_memory(topology, scheme, table), counts)
