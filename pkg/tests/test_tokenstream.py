import numpy as np
import pytest

from csi_forge.config import CHANNEL_TYPES
from csi_forge.dataset import NormStats, compute_norm_stats
from csi_forge.shard import SequenceRecord
from csi_forge import tokenstream as T

from test_shard import _record


class TestChoosePatchSize:
    @pytest.mark.parametrize("d1,d2,want", [
        (4, 4, 8),
        (8, 8, 8),
        (8, 4, 8),
        (64, 64, 8),        # 64 tokens exactly, still fits
        (100, 100, 16),     # 13 * 13 > 64 at patch 8, 7 * 7 at patch 16
        (112, 112, 16),
        (200, 200, 32),
    ])
    def test_cases(self, d1, d2, want):
        assert T.choose_patch_size(d1, d2) == want

    def test_token_budget_honoured(self):
        for d in (4, 25, 50, 75, 100):
            p = T.choose_patch_size(d, d)
            assert -(d // -p) * -(d // -p) <= T.MAX_TOKENS_PER_MATRIX
            assert p >= T.MIN_PATCH


class TestFourier:
    def test_zero_encodes_to_cos_one_sin_zero(self):
        grid = T.fourier_grid()
        enc = T.fourier_encode(0.0, grid)
        assert enc.shape == (64,)
        np.testing.assert_allclose(enc[0::2], 1.0, atol=1e-15)
        np.testing.assert_allclose(enc[1::2], 0.0, atol=1e-15)

    def test_bounded(self):
        grid = T.fourier_grid()
        for x in (-37.2, 0.3, 1e3):
            assert np.abs(T.fourier_encode(x, grid)).max() <= 1.0 + 1e-12

    def test_grid_range(self):
        grid = T.fourier_grid()
        assert grid[0] == pytest.approx(1e-3)
        assert grid[-1] == pytest.approx(1e3)
        assert grid.size == 32

    def test_odd_dimension_rejected(self):
        with pytest.raises(ValueError):
            T.fourier_grid(63)

    def test_single_wavelength(self):
        enc = T.fourier_encode(0.25, np.array([1.0]))
        np.testing.assert_allclose(enc, [np.cos(np.pi / 2), np.sin(np.pi / 2)],
                                   atol=1e-15)


class TestPadAndPatch:
    def test_pad_preserves_and_flags(self):
        m = np.arange(6, dtype=complex).reshape(2, 3)
        padded, pad = T.pad_matrix(m, (4, 4))
        np.testing.assert_array_equal(padded[:2, :3], m)
        assert padded[2:].sum() == 0 and padded[:, 3:].sum() == 0
        assert not pad[:2, :3].any()
        assert pad[2:, :].all() and pad[:, 3:].all()

    def test_pad_rejects_oversize(self):
        with pytest.raises(ValueError, match="exceeds"):
            T.pad_matrix(np.zeros((5, 2)), (4, 4))

    def test_patchify_raster_order(self):
        r = np.arange(256).reshape(16, 16)
        m = r + 1j * (r.T)
        payloads, gr, gc = T.patchify(m, 8)
        assert (gr, gc) == (2, 2)
        assert payloads.shape == (4, 128)
        # patch 1 is the top-right tile; real parts first, then imaginary
        tile = m[0:8, 8:16]
        np.testing.assert_array_equal(payloads[1][:64], tile.real.ravel())
        np.testing.assert_array_equal(payloads[1][64:], tile.imag.ravel())

    def test_depatchify_round_trip(self, rng):
        m = rng.standard_normal((16, 24)) + 1j * rng.standard_normal((16, 24))
        payloads, gr, gc = T.patchify(m, 8)
        np.testing.assert_allclose(T.depatchify(payloads, gr, gc, 8), m, atol=0)

    def test_depatchify_crop(self, rng):
        m = rng.standard_normal((5, 3)) + 1j * rng.standard_normal((5, 3))
        padded, _ = T.pad_matrix(m, (8, 8))
        payloads, gr, gc = T.patchify(padded, 8)
        np.testing.assert_allclose(T.depatchify(payloads, gr, gc, 8, shape=(5, 3)),
                                   m, atol=0)

    def test_patchify_needs_multiple(self):
        with pytest.raises(ValueError, match="multiple"):
            T.patchify(np.zeros((10, 10), dtype=complex), 8)


class TestNormalization:
    def test_cov_scales_mean_diagonal(self):
        recs = [_record(np.random.default_rng(1)) for _ in range(2)]
        recs[0].noise_cov = 2.0 * np.eye(2, dtype=complex)
        recs[1].noise_cov = 4.0 * np.eye(2, dtype=complex)
        scales = T.sequence_cov_scales(recs)
        assert scales["noise_cov"] == pytest.approx(3.0)

    def test_cov_scale_floor(self):
        recs = [_record(np.random.default_rng(1))]
        recs[0].noise_cov = np.zeros((2, 2), dtype=complex)
        recs[0].time_cov = np.zeros((3, 3), dtype=complex)
        scales = T.sequence_cov_scales(recs)
        assert scales["noise_cov"] == 1e-12
        assert scales["time_cov"] == 1e-12

    def test_normalize_record(self):
        rng = np.random.default_rng(5)
        rec = _record(rng)
        rec.delay_center = 2e-6
        stats = NormStats(
            means={k: 0.0 for k in ("n_subcarriers", "delay_center", "delay_len",
                                    "doppler_width", "rank", "spectral_eff")},
            stds={k: 1.0 for k in ("n_subcarriers", "delay_center", "delay_len",
                                   "doppler_width", "rank", "spectral_eff")})
        stats.means["delay_center"] = 1e-6
        stats.stds["delay_center"] = 1e-6
        scales = {"noise_cov": 2.0, "time_cov": 1.0}
        norm = T.normalize_record(rec, stats, scales)
        assert norm["delay_center"] == pytest.approx(1.0)
        np.testing.assert_array_equal(norm["freq_corr"], rec.freq_corr)
        np.testing.assert_array_equal(norm["precoder"], rec.precoder)
        np.testing.assert_allclose(norm["noise_cov"], rec.noise_cov / 2.0, atol=0)
        assert T.denormalize_scalar("delay_center", norm["delay_center"], stats) \
            == pytest.approx(2e-6)

    def test_scalar_at_mean_is_zero(self):
        stats = NormStats(means={"rank": 2.0}, stds={"rank": 0.7})
        assert float(stats.normalize("rank", 2.0)) == 0.0


class TestSchema:
    def test_default_token_budget(self):
        schema = T.default_schema()
        assert schema.tokens_per_slot == 60
        assert schema.tokens_per_sequence == 300
        assert schema.floats_per_sequence == 129935

    def test_per_feature_token_counts(self):
        counts = {f.name: f.tokens_per_slot for f in T.default_schema().features}
        assert counts == {
            "channel_type": 1, "n_subcarriers": 1, "noise_cov": 1,
            "freq_corr": 49, "time_cov": 1, "time_corr": 1,
            "delay_center": 1, "delay_len": 1, "doppler_width": 1,
            "precoder": 1, "rank": 1, "spectral_eff": 1,
        }

    def test_target_flags(self):
        schema = T.default_schema()
        targets = {f.name for f in schema.features if f.is_target}
        assert targets == set(T.TARGET_FEATURES)
        for f in schema.features:
            if f.is_target:
                assert f.target_len == (f.payload_len if f.kind == T.KIND_MATRIX
                                        else 1)

    def test_pad_shapes(self):
        schema = T.default_schema()
        spec = schema.features[schema.feature_id("freq_corr")]
        assert spec.pad_shape == (112, 112) and spec.patch == 16
        spec = schema.features[schema.feature_id("precoder")]
        assert spec.pad_shape == (8, 8) and spec.patch == 8

    def test_digest_tracks_content(self):
        a = T.default_schema()
        b = T.Schema(features=a.features[:-1])
        assert a.digest() == T.default_schema().digest()
        assert a.digest() != b.digest()

    def test_feature_id_lookup(self):
        schema = T.default_schema()
        assert schema.features[schema.feature_id("rank")].name == "rank"
        with pytest.raises(KeyError):
            schema.feature_id("nope")


def _small_sequence(seed=0, n=5):
    rng = np.random.default_rng(seed)
    recs = []
    for k in range(n):
        rec = _record(rng, ct="UMa", b=8, n_sym=4, n_rx=2, n_tx=4, rank=2, slot=k)
        recs.append(rec)
    return SequenceRecord(run_id=(3 << 8) | 1, start_slot=0, records=recs)


@pytest.fixture(scope="module")
def built():
    seq = _small_sequence()
    stats = compute_norm_stats([seq])
    schema = T.default_schema()
    return seq, schema, stats, T.build_token_sequence(seq, schema, stats,
                                                      sequence_id=17)


class TestBuildTokenSequence:
    def test_layout_matches_template(self, built):
        _, schema, _, tseq = built
        template = T._token_template(schema)
        assert len(tseq.tokens) == 300
        for k, t in enumerate(tseq.tokens):
            assert t.feature_id == template["feature_id"][k]
            assert t.slot == template["slot"][k]
            assert t.kind == template["kind"][k]
            assert t.payload.size == template["payload_len"][k]
            assert t.pad.size == t.payload.size

    def test_identity_fields(self, built):
        _, _, _, tseq = built
        assert tseq.sequence_id == 17
        assert tseq.run_id == (3 << 8) | 1
        assert tseq.config_id == 3
        assert tseq.start_slot == 0

    def test_channel_type_one_hot(self, built):
        _, schema, _, tseq = built
        fid = schema.feature_id("channel_type")
        for t in tseq.tokens:
            if t.feature_id == fid:
                np.testing.assert_array_equal(
                    t.payload, np.eye(3)[CHANNEL_TYPES.index("UMa")])

    def test_matrix_pad_flags(self, built):
        seq, schema, _, tseq = built
        fid = schema.feature_id("freq_corr")
        first = next(t for t in tseq.tokens if t.feature_id == fid)
        # B = 8 rows/cols of real data inside a 16 x 16 patch
        flags = first.pad[:256].reshape(16, 16)
        assert not flags[:8, :8].any()
        assert flags[8:, :].all() and flags[:, 8:].all()
        np.testing.assert_array_equal(first.pad[:256], first.pad[256:])

    def test_matrix_payload_content(self, built):
        seq, schema, stats, tseq = built
        fid = schema.feature_id("precoder")
        tok = [t for t in tseq.tokens if t.feature_id == fid and t.slot == 2][0]
        padded, _ = T.pad_matrix(seq.records[2].precoder, (8, 8))
        want, _, _ = T.patchify(padded, 8)
        np.testing.assert_array_equal(tok.payload, want[0])
        np.testing.assert_array_equal(tok.target, want[0])

    def test_scalar_targets_are_standardized_values(self, built):
        seq, schema, stats, tseq = built
        fid = schema.feature_id("doppler_width")
        for slot, t in enumerate(t for t in tseq.tokens if t.feature_id == fid):
            z = float(stats.normalize("doppler_width",
                                      seq.records[slot].doppler_width))
            assert t.target.shape == (1,)
            assert t.target[0] == pytest.approx(z)
            np.testing.assert_allclose(
                t.payload, T.fourier_encode(z, T.fourier_grid()), atol=1e-12)

    def test_payload_shape_uniform_across_configs(self):
        # a 25-group record and a 100-group-sized schema produce identical
        # token geometry; only pad flags differ
        big = T.build_token_sequence(_small_sequence(), T.default_schema(),
                                     compute_norm_stats([_small_sequence()]))
        seq2 = _small_sequence(seed=9)
        for rec in seq2.records:
            rng = np.random.default_rng(1)
            rec.freq_corr = (rng.standard_normal((25, 25))
                             + 1j * rng.standard_normal((25, 25)))
        small = T.build_token_sequence(seq2, T.default_schema(),
                                       compute_norm_stats([seq2]))
        assert [t.payload.size for t in big.tokens] \
            == [t.payload.size for t in small.tokens]

    def test_wrong_length_rejected(self):
        seq = _small_sequence(n=4)
        with pytest.raises(ValueError, match="expected 5"):
            T.build_token_sequence(seq, T.default_schema(),
                                   compute_norm_stats([_small_sequence()]))


class TestMaskPlans:
    def _fresh(self, sequence_id=17):
        seq = _small_sequence()
        stats = compute_norm_stats([seq])
        return T.build_token_sequence(seq, T.default_schema(), stats,
                                      sequence_id=sequence_id)

    def test_pretrain_masks_one_target_per_slot(self):
        schema = T.default_schema()
        tseq = T.apply_mask_plan(self._fresh(), schema, "pretrain", mask_seed=0)
        target_ids = {schema.feature_id(n) for n in T.TARGET_FEATURES}
        by_slot = {}
        for t in tseq.masked_tokens():
            assert t.feature_id in target_ids
            by_slot.setdefault(t.slot, set()).add(t.feature_id)
        assert set(by_slot) == {0, 1, 2, 3, 4}
        assert all(len(v) == 1 for v in by_slot.values())

    def test_masked_payload_zeroed_target_kept(self):
        schema = T.default_schema()
        tseq = T.apply_mask_plan(self._fresh(), schema, "forecast", mask_seed=0,
                                 feature="doppler_width")
        (tok,) = tseq.masked_tokens()
        assert tok.slot == 4
        assert not tok.payload.any()
        assert tok.target_payload is not None
        assert tok.target_payload.shape == (1,)

    def test_interpolation_targets_one_slot(self):
        schema = T.default_schema()
        tseq = T.apply_mask_plan(self._fresh(), schema, "interpolation",
                                 mask_seed=3, feature="precoder")
        toks = tseq.masked_tokens()
        assert len(toks) == 1
        assert toks[0].target_payload.size == 128

    def test_plan_determinism_and_id_dependence(self):
        schema = T.default_schema()
        def plan(sid, seed):
            tseq = T.apply_mask_plan(self._fresh(sid), schema, "pretrain", seed)
            return [(t.feature_id, t.slot) for t in tseq.masked_tokens()]
        assert plan(17, 0) == plan(17, 0)
        plans = {tuple(plan(sid, 0)) for sid in range(10)}
        assert len(plans) > 1
        assert plan(17, 0) != plan(17, 1) or plan(18, 0) != plan(18, 1)

    def test_rejects_bad_requests(self):
        schema = T.default_schema()
        with pytest.raises(ValueError, match="unknown mode"):
            T.apply_mask_plan(self._fresh(), schema, "finetune", 0)
        with pytest.raises(ValueError, match="needs a target"):
            T.apply_mask_plan(self._fresh(), schema, "forecast", 0)
        with pytest.raises(ValueError, match="not a maskable"):
            T.apply_mask_plan(self._fresh(), schema, "forecast", 0,
                              feature="spectral_eff")


class TestExport:
    @pytest.fixture()
    def export_dir(self, tmp_path):
        schema = T.default_schema()
        seqs = [_small_sequence(seed=s) for s in range(3)]
        stats = compute_norm_stats(seqs)
        built = [T.apply_mask_plan(
            T.build_token_sequence(s, schema, stats, sequence_id=i),
            schema, "pretrain", mask_seed=5)
            for i, s in enumerate(seqs)]
        index = T.write_token_export(tmp_path, built, schema, stats,
                                     mode="pretrain", mask_seed=5)
        return tmp_path, schema, stats, built, index

    def test_index_metadata(self, export_dir):
        path, schema, stats, built, index = export_dir
        assert index["schema_digest"] == schema.digest()
        assert index["norm_stats_digest"] == stats.digest()
        assert index["n_sequences"] == 3
        assert index["tokens_per_sequence"] == 300
        assert index["floats_per_sequence"] == 129935
        assert len(index["tokens"]["payload_offset"]) == 300
        assert index["mode"] == "pretrain"

    def test_payload_round_trip(self, export_dir):
        path, schema, stats, built, _ = export_dir
        exp = T.TokenExport(path)
        assert exp.n_sequences == 3
        for i, tseq in enumerate(built):
            got = exp.payloads(i)
            want = np.concatenate([t.payload for t in tseq.tokens]).astype("<f4")
            np.testing.assert_array_equal(got, want)

    def test_targets_round_trip(self, export_dir):
        path, _, _, built, _ = export_dir
        exp = T.TokenExport(path)
        for i, tseq in enumerate(built):
            got = exp.targets(i)
            want = [(k, t.target_payload) for k, t in enumerate(tseq.tokens)
                    if t.masked]
            assert [g[0] for g in got] == [w[0] for w in want]
            for (_, gv), (_, wv) in zip(got, want):
                np.testing.assert_array_equal(gv, np.asarray(wv, dtype="<f4"))

    def test_mask_bits_round_trip(self, export_dir):
        path, _, _, built, _ = export_dir
        exp = T.TokenExport(path)
        for i, tseq in enumerate(built):
            flags = exp.mask_flags(i)
            want = np.array([t.masked for t in tseq.tokens])
            np.testing.assert_array_equal(flags, want)
            pad = exp.pad_bits(i)
            wantp = np.concatenate([t.pad for t in tseq.tokens])
            np.testing.assert_array_equal(pad, wantp)

    def test_token_payload_slicing(self, export_dir):
        path, _, _, built, _ = export_dir
        exp = T.TokenExport(path)
        for k in (0, 3, 59, 299):
            np.testing.assert_array_equal(
                exp.token_payload(1, k),
                np.asarray(built[1].tokens[k].payload, dtype="<f4"))

    def test_file_sizes(self, export_dir):
        path, _, _, built, index = export_dir
        n_targets = sum(t.target_payload.size for q in built
                        for t in q.tokens if t.masked)
        want_floats = 3 * index["floats_per_sequence"] + n_targets
        assert (path / T.TOKENS_NAME).stat().st_size == 4 * want_floats
        per = index["pad_bytes_per_sequence"] + index["flag_bytes_per_sequence"]
        assert (path / T.MASKS_NAME).stat().st_size == 3 * per
