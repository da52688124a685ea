"""Fixed-point training against float and finite-difference oracles, and
witness/direct-path agreement."""

import math
import random

import numpy as np
import pytest

from zkgrad import commit, nn
from zkgrad.fxp import FxpScalar, FxpSpec, FxpTensor, quantize
from zkgrad.nn import data as nndata
from zkgrad.nn.model import Dense, ModelGraph, ModelTables, Softmax, TrainConfig, Weights
from zkgrad.nn.ops import DirectOps
from zkgrad.nn.train import float_backward_batch, float_params, mse_float, run_sgd_step

SPEC13 = FxpSpec(1 << 13, 20)
SPEC15 = FxpSpec(1 << 15, 20)


def dense_model(in_dim, out_dim, loss="mse"):
    return ModelGraph((Dense(in_dim, out_dim),), loss)


def manual_weights(model, spec, tensors):
    packed = {}
    for idx, params in tensors.items():
        packed[idx] = {k: FxpTensor(shape, tuple(data), spec) for k, (shape, data) in params.items()}
    return Weights(packed, spec)


class TestForward:
    def test_dense_identity(self):
        spec = SPEC13
        sf = spec.scale_factor
        model = dense_model(3, 3)
        eye = [sf if i == j else 0 for i in range(3) for j in range(3)]
        w = manual_weights(model, spec, {0: {"w": ((3, 3), eye), "b": ((3,), [0, 0, 0])}})
        x = tuple(quantize(v, spec).raw for v in (0.25, -1.5, 3.0))
        _, preds = nn.forward_fxp(model, w, [(x, (0,) * 3)])
        assert preds.data == x

    def test_recommender_shape_full_config(self):
        # the wide configuration: embedding dim 100, hidden layer 128, output 1
        spec = SPEC13
        model = nn.recommender_model(30, 40, embedding_dim=100, hidden_dims=(128,))
        w = nn.init_weights(model, spec, b"wide-seed")
        batch = [((3, 7), (quantize(2.0, spec).raw,)), ((11, 0), (quantize(4.5, spec).raw,))]
        _, preds = nn.forward_fxp(model, w, batch)
        assert preds.shape == (2, 1)

    def test_mlp_matches_float_oracle_at_2_15(self):
        spec = SPEC15
        rng = random.Random(42)
        model = ModelGraph((Dense(6, 8), nn.ReLU6(), Dense(8, 3)), "mse")
        w = nn.init_weights(model, spec, b"mlp-seed")
        fp = float_params(model, b"mlp-seed")
        # float twin of the quantized weights, not of the pre-quantized draws
        for idx, params in w.tensors.items():
            for key, tensor in params.items():
                fp[idx][key] = np.array(tensor.to_floats()).reshape(fp[idx][key].shape)
        for _ in range(10):
            x = [rng.uniform(-2, 2) for _ in range(6)]
            xq = tuple(quantize(v, spec).raw for v in x)
            _, preds = nn.forward_fxp(model, w, [(xq, (0, 0, 0))])
            from zkgrad.nn.train import _float_forward_one

            out, _ = _float_forward_one(model, fp, [v / spec.scale_factor for v in xq])
            gap = max(
                abs(p / spec.scale_factor - o) for p, o in zip(preds.data, out)
            )
            assert gap <= 32 / spec.scale_factor


class TestBackward:
    def test_perfect_predictions_zero_gradients(self):
        spec = SPEC13
        model = dense_model(2, 1)
        sf = spec.scale_factor
        w = manual_weights(model, spec, {0: {"w": ((2, 1), [sf, sf]), "b": ((1,), [0])}})
        x = (quantize(0.5, spec).raw, quantize(0.25, spec).raw)
        target = (x[0] + x[1],)  # exact output of the identity-sum model
        batch = [(x, target)]
        trace, preds = nn.forward_fxp(model, w, batch)
        assert preds.data == target
        grads = nn.backward_fxp(model, w, trace, batch)
        assert all(v == 0 for v in grads[0]["w"]) and grads[0]["b"] == [0]

    def test_dense_gradient_vs_finite_differences(self):
        # float twin checked against central differences, then fxp against float
        spec = SPEC15
        model = dense_model(3, 2)
        seed = b"fd-seed"
        fp = float_params(model, seed)
        rng = random.Random(7)
        batch_f = [((0.5, -0.25, 1.0), (0.3, -0.2))]
        sf = spec.scale_factor

        grads = float_backward_batch(
            model, fp, [(tuple(quantize(v, spec).raw / sf for v in batch_f[0][0]),
                          tuple(quantize(v, spec).raw for v in batch_f[0][1]))], sf
        )

        def loss(params):
            from zkgrad.nn.train import _float_forward_one

            x = tuple(quantize(v, spec).raw / sf for v in batch_f[0][0])
            y = np.array([quantize(v, spec).raw / sf for v in batch_f[0][1]])
            out, _ = _float_forward_one(model, params, x)
            return float(((out - y) ** 2).sum())

        h = 1e-4
        for key in ("w", "b"):
            arr = fp[0][key]
            flat = arr.reshape(-1)
            for i in range(flat.size):
                up = {0: {k: v.copy() for k, v in fp[0].items()}}
                dn = {0: {k: v.copy() for k, v in fp[0].items()}}
                up[0][key].reshape(-1)[i] += h
                dn[0][key].reshape(-1)[i] -= h
                fd = (loss(up) - loss(dn)) / (2 * h)
                # grads hold the negated gradient
                got = -grads[0][key].reshape(-1)[i]
                assert abs(fd - got) <= 1e-4
                if abs(fd) > 1e-6:
                    assert abs(fd - got) / abs(fd) <= 1e-3

        # fixed-point gradients track the float ones within 64/SF
        wq = nn.init_weights(model, spec, seed)
        batch_q = [
            (
                tuple(quantize(v, spec).raw for v in batch_f[0][0]),
                tuple(quantize(v, spec).raw for v in batch_f[0][1]),
            )
        ]
        trace, _ = nn.forward_fxp(model, wq, batch_q)
        gq = nn.backward_fxp(model, wq, trace, batch_q)
        for key in ("w", "b"):
            for raw, f in zip(gq[0][key], grads[0][key].reshape(-1)):
                assert abs(raw / sf - f) <= 64 / sf

    def test_softmax_ce_gradient_matches_float(self):
        spec = SPEC13
        model = ModelGraph((Dense(4, 3), Softmax()), "cross_entropy")
        seed = b"ce-seed"
        w = nn.init_weights(model, spec, seed)
        fp = float_params(model, seed)
        sf = spec.scale_factor
        x = (quantize(0.5, spec).raw, quantize(-0.25, spec).raw,
             quantize(1.0, spec).raw, quantize(0.1, spec).raw)
        batch = [(x, 2)]
        trace, _ = nn.forward_fxp(model, w, batch)
        gq = nn.backward_fxp(model, w, trace, batch)
        fg = float_backward_batch(model, fp, [(tuple(v / sf for v in x), 2)], sf)
        # bias gradient equals the loss gradient (onehot - y) for batch 1
        for raw, f in zip(gq[0]["b"], fg[0]["b"]):
            assert abs(raw / sf - f) <= 8 / sf


class TestSgdStep:
    def test_zero_learning_rate_is_identity(self):
        spec = SPEC13
        model = dense_model(2, 1)
        w = nn.init_weights(model, spec, b"zero-lr")
        config = TrainConfig(FxpScalar(0, spec), 1, 1, spec)
        grads = {0: {"w": [500, -300], "b": [100]}}
        w2 = nn.sgd_step(model, w, grads, config, [])
        assert w2.tensors[0]["w"].data == w.tensors[0]["w"].data
        assert w2.tensors[0]["b"].data == w.tensors[0]["b"].data

    def test_worked_update_example(self):
        # w=1.0, dw=-0.5, eta=0.01 at SF 2^13: 8192 + round(82*-4096/8192) = 8151
        spec = SPEC13
        model = dense_model(1, 1, loss="mse")
        w = manual_weights(model, spec, {0: {"w": ((1, 1), [8192]), "b": ((1,), [0])}})
        config = TrainConfig.make(0.01, 1, 1, spec)
        assert config.learning_rate.raw == 82
        grads = {0: {"w": [-4096], "b": [0]}}
        w2 = nn.sgd_step(model, w, grads, config, [])
        assert w2.tensors[0]["w"].data == (8151,)

    def test_frozen_layer_unchanged(self):
        spec = SPEC13
        model = ModelGraph(
            (nn.Embedding(4, 2), nn.Embedding(4, 2), nn.Concat(), Dense(4, 1)),
            "mse",
            frozen=(True, False, False, False),
        )
        w = nn.init_weights(model, spec, b"frozen")
        cfg = TrainConfig.make(0.05, 2, 1, spec, b"frozen")
        batch = [((1, 2), (quantize(1.0, spec).raw,)), ((3, 0), (quantize(2.0, spec).raw,))]
        ops = DirectOps(spec, ModelTables.build(model, spec))
        res = run_sgd_step(ops, model, w, batch, cfg)
        assert res.new_weights.tensors[0]["table"].data == w.tensors[0]["table"].data
        assert res.new_weights.tensors[1]["table"].data != w.tensors[1]["table"].data

    def test_lr_underflow_rejected(self):
        with pytest.raises(ValueError, match="underflow"):
            TrainConfig.make(0.00001, 1, 1, FxpSpec(1 << 8, 20))


class TestTrainLoops:
    def setup_method(self):
        self.spec = SPEC13
        self.model = nn.recommender_model(20, 20, embedding_dim=4)
        ratings = nndata.synthetic_ratings(20, 20, 60, seed=3)
        self.examples = nndata.ratings_to_examples(ratings, self.spec)
        self.cfg = nn.TrainConfig.make(0.05, 8, 2, self.spec, b"loop-seed")
        root = commit.build_merkle(
            [commit.commit_example(e[0] + e[1], bytes(16)).value for e in self.examples]
        ).root
        self.traversal = commit.derive_traversal(root, len(self.examples), self.cfg.epochs)

    def test_bit_determinism(self):
        w1 = nn.train_fxp(self.model, self.examples, self.cfg, self.traversal)
        w2 = nn.train_fxp(self.model, self.examples, self.cfg, self.traversal)
        assert w1.tensors == w2.tensors

    def test_float_determinism(self):
        p1 = nn.train_float(self.model, self.examples, self.cfg, self.traversal)
        p2 = nn.train_float(self.model, self.examples, self.cfg, self.traversal)
        m1 = mse_float(self.model, p1, self.examples, self.spec.scale_factor)
        m2 = mse_float(self.model, p2, self.examples, self.spec.scale_factor)
        assert m1 == m2

    def test_float_lr_zero_keeps_loss(self):
        before = mse_float(
            self.model, float_params(self.model, self.cfg.init_seed), self.examples,
            self.spec.scale_factor,
        )
        params = nn.train_float(self.model, self.examples, self.cfg, self.traversal, lr=0.0)
        after = mse_float(self.model, params, self.examples, self.spec.scale_factor)
        assert before == after

    def test_float_beats_label_variance(self):
        ratings = nndata.synthetic_ratings(40, 40, 1000, seed=11)
        examples = nndata.ratings_to_examples(ratings, self.spec)
        model = nn.recommender_model(40, 40, embedding_dim=4)
        cfg = nn.TrainConfig.make(0.05, 8, 3, self.spec, b"var-seed")
        root = commit.build_merkle(
            [commit.commit_example(e[0] + e[1], bytes(16)).value for e in examples]
        ).root
        traversal = commit.derive_traversal(root, len(examples), cfg.epochs)
        params = nn.train_float(model, examples, cfg, traversal)
        test_examples = nndata.ratings_to_examples(
            nndata.synthetic_ratings(40, 40, 1000, seed=11), self.spec
        )[800:]
        mse = mse_float(model, params, test_examples, self.spec.scale_factor)
        labels = [t[0] / self.spec.scale_factor for _, t in test_examples]
        variance = float(np.var(labels))
        assert mse < variance


class TestStepWitness:
    def setup_method(self):
        self.spec = SPEC13
        self.model = nn.recommender_model(10, 10, embedding_dim=4)
        self.w = nn.init_weights(self.model, self.spec, b"wit-seed")
        self.cfg = nn.TrainConfig.make(0.05, 4, 1, self.spec, b"wit-seed")
        self.batch = [
            ((1, 2), (quantize(3.5, self.spec).raw,)),
            ((3, 2), (quantize(1.0, self.spec).raw,)),
            ((1, 5), (quantize(4.0, self.spec).raw,)),
            ((0, 0), (quantize(2.0, self.spec).raw,)),
        ]

    def test_honest_step_passes(self):
        sw = nn.emit_step_witness(self.model, self.w, self.batch, self.cfg)
        assert sw.circuit.check().ok

    def test_outputs_bit_identical_to_direct_path(self):
        sw = nn.emit_step_witness(self.model, self.w, self.batch, self.cfg)
        ops = DirectOps(self.spec, ModelTables.build(self.model, self.spec))
        direct = run_sgd_step(ops, self.model, self.w, self.batch, self.cfg)
        assert sw.new_weights.tensors == direct.new_weights.tensors
        for name, cell in sw.output_cells().items():
            got = self.spec.decode(sw.circuit.grid.value(cell))
            _, idx, key, *rest = name.split(":")
            idx = int(idx)
            if key == "table":
                slot, k = int(rest[0]), int(rest[1])
                row = direct.slot_ids[
                    [i for i in self.model.param_layers()][:2].index(idx)
                ][slot]
                layer = self.model.layers[idx]
                want = direct.new_weights.tensors[idx]["table"].data[row * layer.dim + k]
            else:
                want = direct.new_weights.tensors[idx][key].data[int(rest[0])]
            assert got == want

    def test_perturbing_weight_cell_violates(self):
        sw = nn.emit_step_witness(self.model, self.w, self.batch, self.cfg)
        cell = next(iter(sw.output_cells().values()))
        bad = sw.circuit.grid.tampered(cell.row, cell.col, (sw.circuit.grid.value(cell) + 1) % self.spec.field_modulus)
        assert not sw.circuit.check_grid(bad).ok

    def test_random_perturbations_violate(self):
        rng = random.Random(99)
        sw = nn.emit_step_witness(self.model, self.w, self.batch, self.cfg)
        cells = sw.circuit.constrained_cells()
        for _ in range(20):
            cell = cells[rng.randrange(len(cells))]
            delta = rng.randrange(1, self.spec.field_modulus)
            bad = sw.circuit.grid.tampered(
                cell.row, cell.col, (sw.circuit.grid.value(cell) + delta) % self.spec.field_modulus
            )
            assert not sw.circuit.check_grid(bad).ok


class TestDataIO:
    def test_csv_round_trip(self, tmp_path):
        ratings = nndata.synthetic_ratings(5, 5, 10, seed=1)
        path = tmp_path / "r.csv"
        nndata.save_ratings_csv(path, ratings)
        assert nndata.load_ratings_csv(path) == ratings

    def test_fxv_round_trip(self, tmp_path):
        t = FxpTensor((2, 3), (1, -2, 3, -4, 5, -6), SPEC13)
        path = tmp_path / "v.fxv"
        nndata.write_fxv(path, t)
        back = nndata.read_fxv(path, SPEC13)
        assert back.shape == t.shape and back.data == t.data

    def test_fxv_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fxv"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ValueError, match="magic"):
            nndata.read_fxv(path, SPEC13)

    def test_unit_feature(self):
        t = nndata.unit_feature([3.0, 4.0], SPEC13)
        norm = math.sqrt(sum((v / SPEC13.scale_factor) ** 2 for v in t.data))
        assert abs(norm - 1.0) < 1e-3

    def test_feature_dir(self, tmp_path):
        for name in ("bb", "aa"):
            nndata.write_fxv(tmp_path / f"{name}.fxv", FxpTensor((2,), (1, 2), SPEC13))
        names = [n for n, _ in nndata.read_feature_dir(tmp_path, SPEC13)]
        assert names == ["aa", "bb"]
