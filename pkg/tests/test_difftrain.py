import dataclasses
import json
import pytest
import numpy as np

from pyequicpi import *
from pyequicpi.difftrain.tape import Tape, Tensor, add, matmul, value_of
from pyequicpi.difftrain.checkpoint import CheckpointPreamble

from structures import chain_ligand, protein_pdb_text

CHAINS = [
    ["C", "C"],
    ["C", "O"],
    ["C", "C", "C"],
    ["C", "C", "N"],
    ["C", "N", "C"],
    ["C", "C", "C", "C"],
    ["C", "C", "O", "C"],
    ["N", "C", "C", "O"],
]


@pytest.fixture
def net(small_model_config, small_cutoff):
    return EquiNet(small_model_config, small_cutoff)


@pytest.fixture
def examples(complex_record, pocket, small_cutoff, small_fingerprint):
    records = [complex_record] + [
        ComplexRecord(f"chain{k}", chain_ligand(e, name=f"chain{k}"), pocket, label_ec50_nm=10.0 ** (k + 1))
        for k, e in enumerate(CHAINS[:3])
    ]
    return build_examples(records, small_cutoff, small_fingerprint, require_labels=True)


def _loss(net, params, example):
    result = net.forward_batch(merge_graphs([example.graph]), example.fingerprint.as_array()[None, :], params)
    return mse_loss(result.predictions, np.array([example.label]))


def test_mse_examples():
    assert float(value_of(mse_loss(np.array([1.0]), np.array([10.0])))) == 81.0
    assert float(value_of(mse_loss(np.array([1.0, 2.0]), np.array([3.0, 2.0])))) == 2.0


def test_build_examples_labels(examples):
    assert examples[0].label == pytest.approx(np.log10(250e-9))
    assert examples[1].label == pytest.approx(-8.0)
    assert examples[0].fingerprint.nbits == 64


def test_build_examples_requires_labels(pocket):
    record = ComplexRecord("u", chain_ligand(["C", "C"]), pocket)
    assert build_examples([record])[0].label is None
    with pytest.raises(ValidationError):
        build_examples([record], require_labels=True)


def test_model_gradient_matches_finite_difference():
    cutoff = CutoffConfig(rbf_k=4)
    model_cfg = ModelConfig(
        layers=2,
        multiplicities=(2, 1, 1),
        edge_mlp_hidden=4,
        readout_hidden=4,
        fingerprint_width=16,
        fingerprint_embed=2,
    )
    net = EquiNet(model_cfg, cutoff)
    protein = parse_pdb(protein_pdb_text(("ALA", "SER", "LEU")), "tri")
    record = ComplexRecord("fd", chain_ligand(["C", "C", "O", "N"], name="fd"), protein, label_ec50_nm=50.0)
    (example,) = build_examples([record], cutoff, FingerprintConfig(nbits=16), require_labels=True)
    params = net.init_params(seed=4)
    trainable = params.trainable()
    with Tape() as tape:
        tape.watch(*trainable.values())
        loss = _loss(net, params, example)
    grads = tape.gradient(loss, trainable)
    h = 1e-5
    checked = 0
    for name, tensor in trainable.items():
        for idx in np.ndindex(*tensor.value.shape):
            original = tensor.value[idx]
            tensor.value[idx] = original + h
            plus = float(value_of(_loss(net, params, example)))
            tensor.value[idx] = original - h
            minus = float(value_of(_loss(net, params, example)))
            tensor.value[idx] = original
            fd = (plus - minus) / (2 * h)
            assert abs(grads[name][idx] - fd) <= 1e-4 * max(abs(fd), 1e-2), (name, idx)
            checked += 1
    assert checked == params.count()


def test_position_gradient_under_rotation_generator(net, examples):
    params = net.init_params(seed=4)
    example = examples[0]
    batch = merge_graphs([example.graph])
    X = batch.positions
    A = Tensor(np.zeros((3, 3)))
    with Tape() as tape:
        tape.watch(A)
        positions = add(X, matmul(X, A))
        result = net.forward_batch(batch, example.fingerprint.as_array()[None, :], params, positions=positions)
    (grad,) = tape.gradient(result.predictions, [A])
    # invariance under infinitesimal rotations leaves only a symmetric gradient
    scale = max(np.max(np.abs(grad)), 1e-6)
    np.testing.assert_allclose(grad, grad.T, atol=1e-7 * scale + 1e-10)


def test_position_gradient_under_translation(net, examples):
    params = net.init_params(seed=4)
    example = examples[0]
    batch = merge_graphs([example.graph])
    t = Tensor(np.zeros((1, 3)))
    with Tape() as tape:
        tape.watch(t)
        positions = add(batch.positions, matmul(np.ones((batch.n_nodes, 1)), t))
        result = net.forward_batch(batch, example.fingerprint.as_array()[None, :], params, positions=positions)
    (grad,) = tape.gradient(result.predictions, [t])
    np.testing.assert_allclose(grad, 0.0, atol=1e-9)


def test_zero_learning_rate_keeps_parameters(net, examples):
    params = net.init_params(seed=1)
    before = {k: t.value.copy() for k, t in params.trainable().items()}
    cfg = TrainConfig(learning_rate=0.0, steps=3, batch_size=len(examples), optimizer="sgd")
    trained, losses = train_examples(examples, cfg, net, params.copy())
    assert len(losses) == 3
    assert losses[0] == losses[1] == losses[2]
    for name, value in before.items():
        assert np.array_equal(trained[name].value, value)
    # running statistics are buffers, not parameters, and still follow the batch
    expected = params.copy()
    batch = merge_graphs([e.graph for e in examples])
    fps = np.stack([e.fingerprint.as_array() for e in examples])
    for _ in range(3):
        result = net.forward_batch(batch, fps, expected, training=True)
        for name, value in result.buffer_updates.items():
            expected.assign(name, value)
    assert trained.equals(expected)
    assert not trained.equals(params)


def test_same_seed_same_losses(net, examples):
    cfg = TrainConfig(learning_rate=1e-2, steps=4, batch_size=2, seed=5)
    _, first = train_examples(examples, cfg, net)
    _, second = train_examples(examples, cfg, net)
    assert first == second
    _, other = train_examples(examples, dataclasses.replace(cfg, seed=6), net)
    assert other != first


def test_loss_decreases_on_single_example(net, examples):
    cfg = TrainConfig(learning_rate=1e-2, steps=15, batch_size=1, seed=0)
    _, losses = train_examples(examples[:1], cfg, net)
    assert losses[-1] < losses[0]


def test_small_sgd_steps_never_increase_loss(net, examples):
    cfg = TrainConfig(learning_rate=1e-5, steps=50, batch_size=len(examples), optimizer="sgd", seed=3)
    _, losses = train_examples(examples, cfg, net)
    assert len(losses) == 50
    for before, after in zip(losses, losses[1:]):
        assert after <= before
    assert losses[-1] < losses[0]


def test_training_updates_running_statistics(net, examples):
    params = net.init_params(seed=0)
    trained, _ = train_examples(examples, TrainConfig(steps=1, batch_size=4), net, params.copy())
    assert not np.array_equal(trained["layer0.pc.bn.running_var0"].value, params["layer0.pc.bn.running_var0"].value)


def test_nan_label_diverges(net, examples):
    broken = [dataclasses.replace(examples[0], label=float("nan"))]
    with pytest.raises(TrainingDivergedError) as e:
        train_examples(broken, TrainConfig(steps=2, batch_size=1), net)
    assert e.value.step == 0


def test_exploding_parameters_report_step(net, examples):
    cfg = TrainConfig(learning_rate=1e30, steps=20, batch_size=len(examples), optimizer="sgd")
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as e:
        train_examples(examples, cfg, net)
    assert 1 <= e.value.step < 20


def test_train_examples_rejects_empty_and_unlabelled(net, examples):
    with pytest.raises(ArgumentError):
        train_examples([], TrainConfig(steps=1), net)
    with pytest.raises(ArgumentError):
        train_examples([dataclasses.replace(examples[0], label=None)], TrainConfig(steps=1), net)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=-1e-3)
    with pytest.raises(ValidationError):
        TrainConfig(steps=0)
    with pytest.raises(ArgumentError):
        TrainConfig(optimizer="rmsprop")


def test_train_rejects_fingerprint_width_mismatch(complex_record, small_model_config):
    with pytest.raises(ValidationError):
        train([complex_record], TrainConfig(steps=1), small_model_config, fingerprint=FingerprintConfig(nbits=128))


def test_train_returns_loadable_checkpoint(complex_record, small_model_config, small_cutoff, small_fingerprint):
    cfg = TrainConfig(steps=2, batch_size=1)
    result = train([complex_record], cfg, small_model_config, small_cutoff, small_fingerprint)
    assert len(result.losses) == 2
    model, fingerprint = load_model(result.checkpoint)
    assert model.cfg == small_model_config
    assert model.cutoff == small_cutoff
    assert fingerprint == small_fingerprint
    assert result.checkpoint.config["train"]["steps"] == 2


@pytest.mark.slow
def test_overfits_small_dataset(pocket, small_cutoff):
    model_cfg = ModelConfig(
        layers=2,
        multiplicities=(4, 2, 1),
        edge_mlp_hidden=8,
        readout_hidden=16,
        fingerprint_width=64,
        fingerprint_embed=8,
    )
    net = EquiNet(model_cfg, small_cutoff)
    records = [ComplexRecord(f"c{k}", chain_ligand(e, name=f"c{k}"), pocket) for k, e in enumerate(CHAINS)]
    examples = build_examples(records, small_cutoff, FingerprintConfig(nbits=64))
    reference_params = net.init_params(seed=99)
    targets = net.predict([e.graph for e in examples], [e.fingerprint for e in examples], reference_params)
    targets = (targets - targets.mean()) / targets.std()
    for example, target in zip(examples, targets):
        example.label = float(target)
    _, losses = train_examples(examples, TrainConfig(learning_rate=1e-3, steps=2000, batch_size=8, log_every=0), net)
    assert losses[-1] < 0.01


def test_optimizer_errors():
    with pytest.raises(ArgumentError):
        SGD(-0.1)
    with pytest.raises(ArgumentError):
        make_optimizer("rmsprop", 0.1)


def test_sgd_and_adam_steps():
    params = ParameterStore()
    params.add("w", np.array([1.0, -1.0]))
    SGD(0.5).step(params, {"w": np.array([2.0, 4.0])})
    np.testing.assert_array_equal(params["w"].value, [0.0, -3.0])
    adam = make_optimizer("adam", 0.1)
    adam.step(params, {"w": np.array([4.0, -0.5])})
    # the first bias-corrected step has size lr in every coordinate
    np.testing.assert_allclose(params["w"].value, [-0.1, -2.9], atol=1e-8)


def test_parameter_store_errors():
    params = ParameterStore()
    params.add("w", np.zeros(2))
    with pytest.raises(ConfigurationError):
        params.add("w", np.zeros(2))
    with pytest.raises(ConfigurationError):
        params["missing"]
    with pytest.raises(ConfigurationError):
        params.assign("w", np.zeros(3))
    with pytest.raises(ConfigurationError):
        params.check_shapes({"w": (3,)})
    params.assign("w", np.array([np.inf, 0.0]))
    with pytest.raises(NumericalError):
        params.check_finite()


@pytest.fixture
def checkpoint(net, small_model_config, small_cutoff, small_fingerprint):
    return Checkpoint(
        params=net.init_params(seed=2), config=checkpoint_config(small_model_config, small_cutoff, small_fingerprint)
    )


def test_checkpoint_round_trip_is_byte_identical(checkpoint, tmp_path):
    path = tmp_path / "model.eqcp"
    save_checkpoint(checkpoint, path)
    loaded = load_checkpoint(path)
    assert loaded.params.equals(checkpoint.params)
    assert loaded.config == checkpoint.config
    assert loaded.to_bytes() == path.read_bytes()


def test_checkpoint_bad_magic(checkpoint):
    data = bytearray(checkpoint.to_bytes())
    data[:4] = b"PK\x03\x04"
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(bytes(data))


def test_checkpoint_version_mismatch(checkpoint):
    data = bytearray(checkpoint.to_bytes())
    data[4:8] = (2).to_bytes(4, "little")
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bytes(data))


def test_checkpoint_truncated(checkpoint):
    data = checkpoint.to_bytes()
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(data[:6])


def test_checkpoint_directory_mismatch(checkpoint):
    data = checkpoint.to_bytes()
    preamble = CheckpointPreamble.from_buffer_copy(data[:12])
    header_end = 12 + preamble.HeaderLength
    header = json.loads(data[12:header_end].decode("utf-8"))
    header["tensors"][0]["shape"][0] += 1
    encoded = canonical_json(header).encode("utf-8")
    preamble.HeaderLength = len(encoded)
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(bytes(preamble) + encoded + data[header_end:])


def test_load_model_rejects_mismatched_config(checkpoint):
    config = json.loads(json.dumps(checkpoint.config))
    config["model"]["layers"] = 3
    with pytest.raises(ConfigurationError):
        load_model(Checkpoint(params=checkpoint.params, config=config))
