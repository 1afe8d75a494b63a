import dataclasses
import threading

import numpy as np
import pytest

from lgc3d import compiler
from lgc3d.checker import covering_assignment
from lgc3d.checker import random_chain
from lgc3d.checker import randomize_network
from lgc3d.checker import set_hard_assignment
from lgc3d.compiler import FrozenNetwork
from lgc3d.compiler import bench
from lgc3d.compiler import compile_network
from lgc3d.compiler import load_plan
from lgc3d.compiler import measure
from lgc3d.compiler import run_compiled
from lgc3d.compiler import run_frozen
from lgc3d.compiler import save_plan
from lgc3d.functional import Conv3dSpec
from lgc3d.indexing import PermutationIndex
from lgc3d.lgc import LgcConv3d
from lgc3d.lgc import freeze
from lgc3d.lgc import group_forward
from lgc3d.utils import CheckpointError
from lgc3d.utils import CompileError
from lgc3d.utils import EquivalenceError
from lgc3d.utils import GraphError
from lgc3d.utils import ShapeError


def frozen_layer(rng, channels, kernels, groups):
    layer = LgcConv3d.create(Conv3dSpec(channels, kernels), groups, rng)
    set_hard_assignment(
        layer,
        covering_assignment(channels, groups, rng),
        covering_assignment(kernels, groups, rng),
    )
    return freeze(layer)


def test_single_layer(rng):
    """Test that a compiled single layer equals the frozen layer exactly."""
    layer = frozen_layer(rng, 5, 6, 3)
    x = rng.standard_normal((2, 5, 3, 4, 4)).astype(np.float32)
    compiled = compile_network(FrozenNetwork.chain([layer]))
    np.testing.assert_array_equal(run_compiled(x, compiled), group_forward(x, layer))


def test_single_group_is_identity(rng):
    """Test that single-group layers compile to identity indices."""
    net = FrozenNetwork.chain([frozen_layer(rng, 3, 4, 1), frozen_layer(rng, 4, 2, 1)])
    compiled = compile_network(net)
    assert all(layer.merged_index.is_identity for layer in compiled.conv_layers())
    assert compiled.restoration.is_identity


def test_random_chains(rng):
    """Test that random three-layer chains keep their outputs, with one gather per layer plus one."""
    for _ in range(5):
        net = random_chain(rng, layers=3)
        compiled = compile_network(net)
        x = rng.standard_normal((2, net.in_channels, 3, 4, 4)).astype(np.float32)
        reference, naive = measure(run_frozen, x, net)
        output, stats = measure(run_compiled, x, compiled)
        np.testing.assert_allclose(output, reference, atol=1e-4)
        assert naive.gathers == 6
        assert stats.gathers == 4
        assert stats.permutations_built == 0


def test_merged_index_produces_group_order(rng):
    """Test that each merged index reads the previous physical layout into this layer's group order."""
    net = random_chain(rng, layers=3)
    compiled = compile_network(net)
    order = PermutationIndex.identity(net.in_channels)
    for layer in compiled.conv_layers():
        np.testing.assert_array_equal(order.perm[layer.merged_index.perm], layer.conv.channel_perm.perm)
        order = layer.output_order


def test_network_equivalence(tiny_model, rng):
    """Test that a compiled dense network reproduces the hard-mode network logits."""
    randomize_network(tiny_model, rng)
    frozen = tiny_model.freeze()
    compiled = compile_network(frozen)
    x = rng.standard_normal((3, 1, 8, 5, 5)).astype(np.float32)
    output, stats = measure(run_compiled, x, compiled)
    np.testing.assert_allclose(output, run_frozen(x, frozen), atol=1e-4)
    np.testing.assert_allclose(output, tiny_model.forward(x).data, atol=1e-4)
    assert stats.gathers == len(compiled.conv_layers()) + 1
    assert stats.permutations_built == 0
    assert "source_hash" in compiled.metadata


def test_to_frozen_round_trip(tiny_model, rng):
    """Test that the uncompiled form rebuilt from a plan computes the same outputs."""
    randomize_network(tiny_model, rng)
    frozen = tiny_model.freeze()
    x = rng.standard_normal((2, 1, 8, 5, 5)).astype(np.float32)
    np.testing.assert_allclose(run_frozen(x, compile_network(frozen).to_frozen()), run_frozen(x, frozen), atol=1e-6)


def test_compile_errors(rng):
    """Test that unfrozen inputs and channel mismatches are refused."""
    with pytest.raises(CompileError):
        compile_network([frozen_layer(rng, 3, 3, 1)])  # type: ignore[arg-type]
    with pytest.raises(CompileError):
        FrozenNetwork.chain([])
    mismatched = FrozenNetwork.chain([frozen_layer(rng, 3, 4, 2), frozen_layer(rng, 5, 4, 2)])
    with pytest.raises(GraphError):
        compile_network(mismatched)


def test_run_compiled_wrong_input(rng):
    """Test that an input with the wrong channel count is refused."""
    compiled = compile_network(FrozenNetwork.chain([frozen_layer(rng, 3, 4, 2)]))
    with pytest.raises(ShapeError):
        run_compiled(np.ones((1, 2, 3, 3, 3), dtype=np.float32), compiled)


def test_plan_round_trip(tmp_path, tiny_model, rng):
    """Test that a saved plan loads back to the same computation."""
    randomize_network(tiny_model, rng)
    compiled = compile_network(tiny_model.freeze())
    path = tmp_path / "model.plan"
    save_plan(path, compiled)
    loaded = load_plan(path)
    x = rng.standard_normal((2, 1, 8, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(run_compiled(x, loaded), run_compiled(x, compiled))
    assert loaded.metadata["source_hash"] == compiled.metadata["source_hash"]
    assert [layer.name for layer in loaded.layers] == [layer.name for layer in compiled.layers]


def test_plan_corruption(tmp_path, rng):
    """Test that a flipped payload byte is detected when loading a plan."""
    path = tmp_path / "chain.plan"
    save_plan(path, compile_network(FrozenNetwork.chain([frozen_layer(rng, 3, 4, 2)])))
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_plan(path)


def test_bench(rng):
    """Test the gather counts reported by the benchmark."""
    net = random_chain(rng, layers=3)
    report = bench(compile_network(net), [(1, net.in_channels, 3, 4, 4), (2, net.in_channels, 3, 4, 4)], repetitions=2)
    assert report.layers == 3
    assert len(report.rows) == 2
    for row in report.rows:
        assert row.naive_gathers == 6
        assert row.compiled_gathers == 4
        assert row.max_abs_diff <= 1e-4
        assert row.naive_ms >= 0 and row.compiled_ms >= 0


def test_bench_detects_divergence(rng):
    """Test that the benchmark refuses a plan whose outputs differ from its uncompiled form."""
    compiled = compile_network(FrozenNetwork.chain([frozen_layer(rng, 3, 4, 2)]))
    broken = dataclasses.replace(compiled, restoration=PermutationIndex(compiled.restoration.perm[::-1]))
    with pytest.raises(EquivalenceError):
        bench(broken, [(1, 3, 3, 3, 3)], repetitions=1)


def test_run_compiled_beside_concurrent_compilation(monkeypatch, rng):
    """Test that compiling in another thread during a compiled run is not taken for a runtime permutation."""
    net = random_chain(rng, layers=3)
    other = random_chain(rng, layers=3)
    compiled = compile_network(net)
    convolve = compiler.grouped_convolution

    def convolve_while_compiling(x, conv):
        worker = threading.Thread(target=compile_network, args=(other,))
        worker.start()
        worker.join()
        return convolve(x, conv)

    monkeypatch.setattr(compiler, "grouped_convolution", convolve_while_compiling)
    x = rng.standard_normal((2, net.in_channels, 3, 4, 4)).astype(np.float32)
    output, stats = measure(run_compiled, x, compiled)
    np.testing.assert_allclose(output, run_frozen(x, net), atol=1e-4)
    assert stats.permutations_built == 0


def test_run_compiled_detects_runtime_permutation(monkeypatch, rng):
    """Test that a permutation built by the running thread is still reported."""
    net = random_chain(rng, layers=2)
    compiled = compile_network(net)
    convolve = compiler.grouped_convolution

    def convolve_with_permutation(x, conv):
        PermutationIndex.identity(x.shape[1])
        return convolve(x, conv)

    monkeypatch.setattr(compiler, "grouped_convolution", convolve_with_permutation)
    with pytest.raises(CompileError, match="permutation was constructed"):
        run_compiled(rng.standard_normal((1, net.in_channels, 3, 4, 4)).astype(np.float32), compiled)
