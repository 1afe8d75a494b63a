import numpy as np

from .compiler import FrozenNetwork
from .compiler import compile_network
from .compiler import measure
from .compiler import run_compiled
from .compiler import run_frozen
from .densenet import ModelConfig
from .densenet import balanced_counts
from .densenet import build_model
from .densenet import conv_madds
from .densenet import predefined_configs
from .functional import Conv3dSpec
from .functional import avg_pool3d
from .functional import batch_norm
from .functional import conv3d
from .functional import cross_entropy
from .functional import global_avg_pool
from .functional import linear
from .functional import relu
from .functional import softmax_rows
from .gradcheck import finite_difference_check
from .lgc import LgcConv3d
from .lgc import SelectionMode
from .lgc import freeze
from .lgc import group_forward
from .lgc import group_regularizer
from .lgc import lgc_forward
from .metrics import average_accuracy
from .metrics import confusion_matrix
from .metrics import kappa
from .metrics import overall_accuracy
from .tensor import Tensor
from .tensor import concat
from .tensor import parameter
from .utils import CheckConfig
from .utils import CheckResult
from .utils import Status
from .utils import checker


def _params(rng: np.random.Generator, **shapes: tuple[int, ...]) -> dict[str, Tensor]:
    return {name: parameter(rng.standard_normal(shape)) for name, shape in shapes.items()}


def _gradient_cases(rng: np.random.Generator):
    """Yield ``(op name, scalar function, parameters)`` for one random instance of every differentiable operation."""
    p = _params(rng, x=(2, 3), y=(2, 3))
    weights = rng.standard_normal((2, 3))
    yield "add", lambda p=p, w=weights: ((p["x"] + p["y"] - 0.5 + 0.3 * -p["x"]) * Tensor(w)).sum(), p

    p = _params(rng, x=(3, 4), y=(3, 4))
    weights = rng.standard_normal((3, 4))
    yield "mul", lambda p=p, w=weights: ((p["x"] * p["y"]) * Tensor(w)).sum(), p

    p = _params(rng, x=(2, 3), y=(3, 4))
    weights = rng.standard_normal((2, 4))
    yield "matmul", lambda p=p, w=weights: ((p["x"] @ p["y"]) * Tensor(w)).sum(), p

    p = _params(rng, x=(2, 3, 4))
    weights = rng.standard_normal((3, 4))
    yield "sum", lambda p=p, w=weights: (p["x"].sum(axis=0) * Tensor(w)).sum() + p["x"].mean(), p

    p = _params(rng, x=(2, 3, 4))
    weights = rng.standard_normal((4, 3, 2))
    yield "reshape_transpose", lambda p=p, w=weights: (
        p["x"].reshape(6, 4).transpose(1, 0).reshape(4, 3, 2) * Tensor(w)
    ).sum(), p

    p = _params(rng, x=(2, 5, 3))
    indices = rng.permutation(5)[:4]
    weights = rng.standard_normal((2, 4, 3))
    yield "take", lambda p=p, i=indices, w=weights: (p["x"].take(i, axis=1) * Tensor(w)).sum(), p

    p = _params(rng, x=(2, 2, 3), y=(2, 3, 3))
    weights = rng.standard_normal((2, 5, 3))
    yield "concat", lambda p=p, w=weights: (concat([p["x"], p["y"]], axis=1) * Tensor(w)).sum(), p

    spec = Conv3dSpec(2, 2, kernel=(3, 2, 3), padding=(1, 0, 1))
    p = _params(rng, x=(1, 2, 3, 3, 3), w=spec.weight_shape)
    weights = rng.standard_normal((1, 2, *spec.output_dims((3, 3, 3))))
    yield "conv3d", lambda p=p, s=spec, w=weights: (conv3d(p["x"], p["w"], s) * Tensor(w)).sum(), p

    p = _params(rng, x=(1, 2, 4, 4, 4))
    weights = rng.standard_normal((1, 2, 2, 2, 2))
    yield "avg_pool3d", lambda p=p, w=weights: (avg_pool3d(p["x"], 2) * Tensor(w)).sum(), p

    p = _params(rng, x=(3, 2, 2, 2, 2), gamma=(2,), beta=(2,))
    weights = rng.standard_normal((3, 2, 2, 2, 2))

    def batch_norm_loss(p=p, w=weights):
        running_mean, running_var = np.zeros(2), np.ones(2)
        return (batch_norm(p["x"], p["gamma"], p["beta"], running_mean, running_var, True) * Tensor(w)).sum()

    yield "batch_norm", batch_norm_loss, p

    p = _params(rng, x=(3, 4))
    weights = rng.standard_normal((3, 4))
    yield "relu", lambda p=p, w=weights: (relu(p["x"]) * Tensor(w)).sum(), p

    p = _params(rng, x=(3, 4))
    weights = rng.standard_normal((3, 4))
    yield "softmax_rows", lambda p=p, w=weights: (softmax_rows(p["x"]) * Tensor(w)).sum(), p

    p = _params(rng, x=(4, 3))
    labels = rng.integers(0, 3, size=4)
    yield "cross_entropy", lambda p=p, y=labels: cross_entropy(p["x"], y), p

    p = _params(rng, x=(3, 4), w=(2, 4), b=(2,))
    weights = rng.standard_normal((3, 2))
    yield "linear", lambda p=p, w=weights: (linear(p["x"], p["w"], p["b"]) * Tensor(w)).sum(), p

    p = _params(rng, x=(2, 3, 2, 2, 2))
    weights = rng.standard_normal((2, 3))
    yield "global_avg_pool", lambda p=p, w=weights: (global_avg_pool(p["x"]) * Tensor(w)).sum(), p

    layer = LgcConv3d.create(Conv3dSpec(3, 4, kernel=(2, 2, 2), padding=0), 2, rng, dtype=np.float64)
    layer.channel_selection.logits.data[...] = rng.standard_normal((3, 2))
    layer.kernel_selection.logits.data[...] = rng.standard_normal((4, 2))
    p = {"x": parameter(rng.standard_normal((1, 3, 3, 3, 3))), **layer.parameters()}
    weights = rng.standard_normal((1, 4, 2, 2, 2))
    yield "lgc_forward", lambda p=p, layer=layer, w=weights: (lgc_forward(p["x"], layer) * Tensor(w)).sum(), p

    layer = LgcConv3d.create(Conv3dSpec(4, 4), 3, rng, dtype=np.float64)
    # concentrate the mass so that some columns fall under the floor
    layer.channel_selection.logits.data[...] = 3.0 * rng.standard_normal((4, 3))
    layer.kernel_selection.logits.data[...] = 3.0 * rng.standard_normal((4, 3))
    p = {
        "channel_logits": layer.channel_selection.logits,
        "kernel_logits": layer.kernel_selection.logits,
    }
    yield "group_regularizer", lambda layer=layer: group_regularizer(
        layer.channel_selection, layer.kernel_selection
    ), p


@checker
def check_gradients(conf: CheckConfig) -> CheckResult:
    """Analytic gradients of every differentiable operation match central finite differences in float64."""
    rng = np.random.default_rng(conf.seed)
    worst: dict[str, float] = {}
    for _ in range(conf.instances):
        for name, func, params in _gradient_cases(rng):
            report = finite_difference_check(func, params, step=1e-5, tolerance=conf.gradient_tolerance)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)

    failing = sorted(name for name, error in worst.items() if error >= conf.gradient_tolerance)
    if failing:
        return CheckResult(
            conf,
            status=Status.ERROR,
            reason=f"gradients of {', '.join(failing)} exceed the relative error {conf.gradient_tolerance:g}",
            data=worst,
        )
    return CheckResult(
        conf,
        status=Status.SUCCESS,
        reason=f"{len(worst)} operations within {conf.gradient_tolerance:g} over {conf.instances} instances, "
        f"worst {max(worst.values()):.2e}",
        data=worst,
    )


def covering_assignment(rows: int, groups: int, rng: np.random.Generator) -> np.ndarray:
    """Random group ids of ``rows`` items in which every group has at least one member."""
    assignment = np.concatenate([np.arange(groups), rng.integers(0, groups, size=rows - groups)])
    return rng.permutation(assignment)


def set_hard_assignment(layer: LgcConv3d, channels: np.ndarray, kernels: np.ndarray) -> None:
    """Overwrite the selection logits so that their argmax yields the given group ids."""
    for selection, assignment in ((layer.channel_selection, channels), (layer.kernel_selection, kernels)):
        logits = np.zeros(selection.logits.shape, dtype=selection.logits.dtype)
        logits[np.arange(len(assignment)), assignment] = 1
        selection.logits.data[...] = logits


@checker
def check_decomposition(conf: CheckConfig) -> CheckResult:
    """A hard-mode masked full convolution equals the frozen per-group convolution on ragged random layers."""
    rng = np.random.default_rng(conf.seed)
    worst = 0.0
    for _ in range(conf.layers):
        channels, kernels = (int(v) for v in rng.integers(2, 13, size=2))
        groups = int(rng.integers(1, min(channels, kernels, 4) + 1))
        layer = LgcConv3d.create(Conv3dSpec(channels, kernels), groups, rng)
        set_hard_assignment(
            layer,
            covering_assignment(channels, groups, rng),
            rng.integers(0, groups, size=kernels),
        )
        layer.set_mode(SelectionMode.HARD)
        x = rng.standard_normal((2, channels, 4, 5, 5)).astype(np.float32)
        expected = lgc_forward(Tensor(x), layer).data
        actual = group_forward(x, freeze(layer))
        worst = max(worst, float(np.abs(expected - actual).max()))

    if worst > 1e-5:
        return CheckResult(
            conf,
            status=Status.ERROR,
            reason=f"frozen and masked convolutions differ by {worst:.3g}",
            data=worst,
        )
    return CheckResult(
        conf,
        status=Status.SUCCESS,
        reason=f"{conf.layers} random layers agree, worst difference {worst:.2e}",
        data=worst,
    )


def _selection_gap_logits(rows: int, groups: int, rng: np.random.Generator) -> np.ndarray:
    assignment = covering_assignment(rows, groups, rng)
    logits = rng.uniform(-0.5, 0.5, size=(rows, groups))
    logits[np.arange(rows), assignment] = logits.max(axis=1) + rng.uniform(0.5, 1.0, size=rows)
    return logits


@checker
def check_soft_hard_continuity(conf: CheckConfig) -> CheckResult:
    """Scaling the selection logits by 1, 10 and 100 moves the soft connection mask monotonically onto the hard one."""
    rng = np.random.default_rng(conf.seed)
    temperatures = (1.0, 10.0, 100.0)
    curves = []
    for _ in range(conf.instances):
        groups = int(rng.integers(2, 5))
        channels, kernels = (int(v) for v in rng.integers(groups, 9, size=2))
        layer = LgcConv3d.create(Conv3dSpec(channels, kernels), groups, rng, dtype=np.float64)
        layer.channel_selection.logits.data[...] = _selection_gap_logits(channels, groups, rng)
        layer.kernel_selection.logits.data[...] = _selection_gap_logits(kernels, groups, rng)
        hard = layer.kernel_selection.one_hot() @ layer.channel_selection.one_hot().T
        deviations = []
        for temperature in temperatures:
            layer.set_temperature(temperature)
            soft = (layer.kernel_selection.soft() @ layer.channel_selection.soft().transpose()).data
            deviations.append(float(np.abs(soft - hard).max()))
        curves.append(deviations)
        if not all(a > b for a, b in zip(deviations, deviations[1:])):
            return CheckResult(
                conf,
                status=Status.ERROR,
                reason=f"soft-to-hard deviation {deviations} does not decrease with the temperatures {temperatures}",
                data=curves,
            )
    return CheckResult(
        conf,
        status=Status.SUCCESS,
        reason=f"deviation decreases on {conf.instances} random layers, worst at 100: {max(c[-1] for c in curves):.2e}",
        data=curves,
    )


def toy_configs(bands: int = 16, patch_size: int = 9, num_classes: int = 4) -> dict[str, ModelConfig]:
    """The predefined network sizes shrunk to a few bands and classes."""
    return {
        name: ModelConfig.model_validate(
            {**config.model_dump(), "bands": bands, "patch_size": patch_size, "num_classes": num_classes}
        )
        for name, config in predefined_configs().items()
    }


def randomize_network(model, rng: np.random.Generator) -> None:
    """Random hard groupings and batch-norm statistics, so that every permutation and folded norm matters."""
    for layer in model.lgc_layers().values():
        layer.channel_selection.logits.data[...] = rng.standard_normal(layer.channel_selection.logits.shape)
        layer.kernel_selection.logits.data[...] = rng.standard_normal(layer.kernel_selection.logits.shape)
    for norm in model.batch_norms().values():
        norm.gamma.data[...] = rng.uniform(0.5, 1.5, norm.channels)
        norm.beta.data[...] = rng.normal(0.0, 0.1, norm.channels)
        norm.running_mean[...] = rng.normal(0.0, 0.1, norm.channels)
        norm.running_var[...] = rng.uniform(0.5, 1.5, norm.channels)
    model.set_mode(SelectionMode.HARD)


def random_chain(rng: np.random.Generator, layers: int = 3) -> FrozenNetwork:
    """A plain stack of frozen layers with random ragged groupings."""
    channels = int(rng.integers(2, 9))
    frozen = []
    for _ in range(layers):
        kernels = int(rng.integers(2, 9))
        groups = int(rng.integers(1, min(channels, kernels, 4) + 1))
        layer = LgcConv3d.create(Conv3dSpec(channels, kernels), groups, rng)
        set_hard_assignment(
            layer,
            covering_assignment(channels, groups, rng),
            rng.integers(0, groups, size=kernels),
        )
        frozen.append(freeze(layer))
        channels = kernels
    return FrozenNetwork.chain(frozen)


def _compare(name: str, net: FrozenNetwork, inputs: list[np.ndarray]) -> dict:
    compiled = compile_network(net)
    layers = len(compiled.conv_layers())
    row = {
        "network": name,
        "layers": layers,
        "inputs": len(inputs),
        "max_abs_diff": 0.0,
        "naive_gathers": 0,
        "compiled_gathers": 0,
        "permutations_built": 0,
        "gather_law": True,
    }
    for x in inputs:
        reference, naive = measure(run_frozen, x, net)
        output, stats = measure(run_compiled, x, compiled)
        row["max_abs_diff"] = max(row["max_abs_diff"], float(np.abs(reference - output).max()))
        row["naive_gathers"] = max(row["naive_gathers"], naive.gathers)
        row["compiled_gathers"] = max(row["compiled_gathers"], stats.gathers)
        row["permutations_built"] += stats.permutations_built
        row["gather_law"] = row["gather_law"] and stats.gathers == layers + 1 and naive.gathers == 2 * layers
    return row


@checker
def check_compiler(conf: CheckConfig) -> CheckResult:
    """Compiled networks match their uncompiled frozen form, with one gather per layer and no runtime permutation."""
    rng = np.random.default_rng(conf.seed)
    rows = []
    for name, config in toy_configs().items():
        model = build_model(config, rng)
        randomize_network(model, rng)
        shape = (2, 1, config.bands, config.patch_size, config.patch_size)
        inputs = [rng.standard_normal(shape).astype(np.float32) for _ in range(conf.inputs)]
        rows.append(_compare(name, model.freeze(), inputs))
    for index in range(conf.chains):
        net = random_chain(rng)
        inputs = [rng.standard_normal((2, net.in_channels, 3, 4, 4)).astype(np.float32) for _ in range(conf.inputs)]
        rows.append(_compare(f"chain{index}", net, inputs))

    for row in rows:
        if row["max_abs_diff"] > conf.equivalence_tolerance:
            return CheckResult(
                conf,
                status=Status.ERROR,
                reason=f"{row['network']}: compiled output differs by {row['max_abs_diff']:.3g}",
                data=rows,
            )
        if not row["gather_law"] or row["permutations_built"]:
            return CheckResult(
                conf,
                status=Status.ERROR,
                reason=f"{row['network']}: {row['compiled_gathers']} compiled and {row['naive_gathers']} naive gathers "
                f"for {row['layers']} layers, {row['permutations_built']} permutations built at runtime",
                data=rows,
            )
    return CheckResult(
        conf,
        status=Status.SUCCESS,
        reason=f"{len(rows)} networks compiled and run on {conf.inputs} inputs each, "
        f"worst difference {max(r['max_abs_diff'] for r in rows):.2e}",
        data=rows,
    )


@checker
def check_flop_law(conf: CheckConfig) -> CheckResult:
    """Splitting a convolution into G balanced groups divides its multiply-adds by exactly G."""
    rng = np.random.default_rng(conf.seed)
    cases = []
    for _ in range(max(conf.instances, 50)):
        groups = int(rng.integers(1, 5))
        channels, kernels = (groups * int(v) for v in rng.integers(1, 5, size=2))
        dims = tuple(int(v) for v in rng.integers(1, 9, size=3))
        spec = Conv3dSpec(channels, kernels)
        standard = conv_madds(spec, dims)  # type: ignore[arg-type]
        grouped = conv_madds(spec, dims, balanced_counts(channels, groups), balanced_counts(kernels, groups))  # type: ignore[arg-type]
        cases.append({"groups": groups, "standard": standard, "grouped": grouped})
        if standard != groups * grouped:
            return CheckResult(
                conf,
                status=Status.ERROR,
                reason=f"C={channels}, N={kernels}, G={groups}: {standard} standard vs {grouped} grouped multiply-adds",
                data=cases,
            )
    return CheckResult(conf, status=Status.SUCCESS, reason=f"{len(cases)} layers follow the ratio law", data=cases)


def brute_force_metrics(true: np.ndarray, pred: np.ndarray, num_classes: int) -> tuple[float, float, float]:
    """Overall accuracy, average accuracy and kappa computed sample by sample."""
    n = len(true)
    hits = sum(1 for t, p in zip(true, pred, strict=True) if t == p)
    recalls = []
    chance = 0.0
    for k in range(num_classes):
        support = sum(1 for t in true if t == k)
        predicted = sum(1 for p in pred if p == k)
        chance += (support / n) * (predicted / n)
        if support:
            recalls.append(sum(1 for t, p in zip(true, pred, strict=True) if t == k and p == k) / support)
    observed = hits / n
    agreement = (1.0 if observed == 1.0 else 0.0) if chance == 1.0 else (observed - chance) / (1.0 - chance)
    return observed, sum(recalls) / len(recalls), agreement


@checker
def check_metrics(conf: CheckConfig) -> CheckResult:
    """Metrics derived from the confusion matrix equal a per-sample brute-force computation."""
    rng = np.random.default_rng(conf.seed)
    worst = 0.0
    for _ in range(max(conf.instances, 100)):
        num_classes = int(rng.integers(2, 8))
        n = int(rng.integers(1, 60))
        true = rng.integers(0, num_classes, size=n)
        pred = np.where(rng.random(n) < 0.6, true, rng.integers(0, num_classes, size=n))
        matrix = confusion_matrix(true, pred, num_classes)
        expected = brute_force_metrics(true, pred, num_classes)
        actual = (overall_accuracy(matrix), average_accuracy(matrix), kappa(matrix))
        worst = max(worst, max(abs(a - e) for a, e in zip(actual, expected, strict=True)))

    if worst > 1e-12:
        return CheckResult(
            conf, status=Status.ERROR, reason=f"metrics differ from the brute force by {worst:.3g}", data=worst
        )
    return CheckResult(conf, status=Status.SUCCESS, reason=f"worst difference {worst:.2e}", data=worst)


def check_engine(conf: CheckConfig | None = None) -> list[CheckResult]:
    """Run every numerical check of the engine.

    Gradients are checked first, then the layer decomposition, the soft to hard
    continuity, the compiler equivalence and gather counts, the multiply-add
    law and finally the metrics.

    :param conf: The check configuration, defaults to :class:`~lgc3d.CheckConfig`.
    """
    conf = conf or CheckConfig()
    return [
        check_gradients(conf),
        check_decomposition(conf),
        check_soft_hard_continuity(conf),
        check_compiler(conf),
        check_flop_law(conf),
        check_metrics(conf),
    ]
