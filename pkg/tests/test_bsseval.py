"""BSS-eval decomposition and metric tests."""

import itertools
import warnings
from contextlib import contextmanager

import numpy as np
import pytest


@contextmanager
def warnings_catcher():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        yield caught

from danet.bsseval import (
    EvalConfig,
    bss_decompose,
    resolve_permutation,
    sdr_sir_sar,
)

L1 = EvalConfig(proj_len=1)


def orthogonal_pair(n=4000):
    ref0 = np.tile([1.0, 1.0, -1.0, -1.0], n // 4)
    ref1 = np.tile([1.0, -1.0], n // 2)
    assert abs(ref0 @ ref1) == 0.0
    return ref0, ref1


class TestDecompose:
    def test_self_projection(self):
        rng = np.random.default_rng(60)
        ref = rng.normal(size=2000)
        other = rng.normal(size=2000)
        s, ei, ea = bss_decompose(ref, [ref, other], 0, L1)
        assert np.allclose(s, ref, atol=1e-8)
        assert np.linalg.norm(ei) < 1e-8 * np.linalg.norm(ref)
        assert np.linalg.norm(ea) < 1e-8 * np.linalg.norm(ref)

    def test_pure_interference(self):
        ref0, ref1 = orthogonal_pair()
        s, ei, ea = bss_decompose(ref1, [ref0, ref1], 0, L1)
        assert np.linalg.norm(s) < 1e-9 * np.linalg.norm(ref1)
        assert np.allclose(ei, ref1, atol=1e-9)
        assert np.linalg.norm(ea) < 1e-9 * np.linalg.norm(ref1)

    def test_additivity_and_orthogonality_vs_dense_oracle(self):
        # Dense oracle: build the explicit delayed-copy matrix and use lstsq.
        rng = np.random.default_rng(61)
        n, L = 400, 4
        refs = [rng.normal(size=n), rng.normal(size=n)]
        est = (0.8 * refs[0] + 0.3 * refs[1] + 0.1 * rng.normal(size=n))
        cfg = EvalConfig(proj_len=L)
        s, ei, ea = bss_decompose(est, refs, 0, cfg)

        padded_len = n + L - 1
        est_pad = np.concatenate([est, np.zeros(L - 1)])
        total = s + ei + ea
        assert np.linalg.norm(total - est_pad) < 1e-9 * np.linalg.norm(est_pad)

        scale = np.linalg.norm(est_pad) ** 2
        assert abs(s @ ei) < 1e-9 * scale
        assert abs(s @ ea) < 1e-9 * scale
        assert abs(ei @ ea) < 1e-9 * scale

        def delayed_matrix(which):
            cols = []
            for i in which:
                for tau in range(L):
                    col = np.zeros(padded_len)
                    col[tau:tau + n] = refs[i]
                    cols.append(col)
            return np.stack(cols, axis=1)

        a_target = delayed_matrix([0])
        c0, *_ = np.linalg.lstsq(a_target, est_pad, rcond=None)
        oracle_s = a_target @ c0
        a_all = delayed_matrix([0, 1])
        c_all, *_ = np.linalg.lstsq(a_all, est_pad, rcond=None)
        oracle_all = a_all @ c_all
        assert np.allclose(s, oracle_s, atol=1e-7)
        assert np.allclose(ei, oracle_all - oracle_s, atol=1e-7)
        assert np.allclose(ea, est_pad - oracle_all, atol=1e-7)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            bss_decompose(np.ones(10), [np.ones(12)], 0, L1)

    def test_rank_deficient_refs_warn_but_run(self):
        ref = np.sin(np.arange(500) * 0.1)
        with pytest.warns(UserWarning, match="rank-deficient"):
            s, ei, ea = bss_decompose(ref, [ref, ref.copy()], 0, EvalConfig(proj_len=2))
        assert np.allclose(s + ei + ea, np.concatenate([ref, [0.0]]), atol=1e-6)

    def test_healthy_refs_do_not_warn(self):
        rng = np.random.default_rng(70)
        refs = [rng.normal(size=500), rng.normal(size=500)]
        with warnings_catcher() as caught:
            bss_decompose(refs[0] + refs[1], refs, 0, EvalConfig(proj_len=4))
        assert not caught


class TestSdrSirSar:
    def test_exact_estimate_hits_cap(self):
        ref = np.sin(np.arange(3000) * 0.05)
        other = np.cos(np.arange(3000) * 0.11)
        sdr, sir, sar = sdr_sir_sar(ref.copy(), [ref, other], 0, L1)
        assert sdr == sir == sar == 100.0

    def test_ten_percent_orthogonal_noise_is_20db(self):
        rng = np.random.default_rng(62)
        ref = np.sin(2 * np.pi * 440 * np.arange(8000) / 8000)
        noise = rng.normal(size=8000)
        noise -= (noise @ ref) / (ref @ ref) * ref
        noise *= 0.1 * np.linalg.norm(ref) / np.linalg.norm(noise)
        sdr, _, sar = sdr_sir_sar(ref + noise, [ref], 0, L1)
        assert sdr == pytest.approx(20.0, abs=0.01)
        assert sar == pytest.approx(20.0, abs=0.01)

    def test_zero_estimate_reports_minus_cap(self):
        ref = np.sin(np.arange(1000) * 0.07)
        sdr, sir, sar = sdr_sir_sar(np.zeros(1000), [ref], 0, L1)
        assert sdr == -100.0 and sir == -100.0 and sar == -100.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(63)
        refs = [rng.normal(size=1500), rng.normal(size=1500)]
        est = refs[0] + 0.4 * refs[1] + 0.05 * rng.normal(size=1500)
        for cfg in (L1, EvalConfig(proj_len=8)):
            base = sdr_sir_sar(est, refs, 0, cfg)
            scaled = sdr_sir_sar(7.3 * est, refs, 0, cfg)
            assert np.allclose(base, scaled, atol=1e-6)

    def test_matches_dense_reference_for_two_sources(self):
        # Independent dense-matrix implementation of the same L-tap metrics.
        rng = np.random.default_rng(64)
        n, L = 600, 6
        refs = [rng.normal(size=n), rng.normal(size=n)]
        est = 0.9 * refs[0] + 0.2 * refs[1] + 0.05 * rng.normal(size=n)
        cfg = EvalConfig(proj_len=L)
        got = sdr_sir_sar(est, refs, 0, cfg)

        padded_len = n + L - 1
        est_pad = np.concatenate([est, np.zeros(L - 1)])
        cols = []
        for r in refs:
            for tau in range(L):
                col = np.zeros(padded_len)
                col[tau:tau + n] = r
                cols.append(col)
        a_all = np.stack(cols, axis=1)
        a_tgt = a_all[:, :L]
        s = a_tgt @ np.linalg.lstsq(a_tgt, est_pad, rcond=None)[0]
        p_all = a_all @ np.linalg.lstsq(a_all, est_pad, rcond=None)[0]
        ei, ea = p_all - s, est_pad - p_all
        expect = (10 * np.log10(np.sum(s**2) / np.sum((ei + ea)**2)),
                  10 * np.log10(np.sum(s**2) / np.sum(ei**2)),
                  10 * np.log10(np.sum((s + ei)**2) / np.sum(ea**2)))
        assert np.allclose(got, expect, atol=1e-6)


class TestResolvePermutation:
    def make_pair(self, seed=65):
        rng = np.random.default_rng(seed)
        refs = [rng.normal(size=2000), rng.normal(size=2000)]
        return refs

    def test_identity(self):
        refs = self.make_pair()
        m = resolve_permutation([r.copy() for r in refs], refs, L1)
        assert m.permutation == (0, 1)
        assert np.all(m.sdr == 100.0)

    def test_swap(self):
        refs = self.make_pair()
        m_swap = resolve_permutation([refs[1].copy(), refs[0].copy()], refs, L1)
        assert m_swap.permutation == (1, 0)
        assert np.all(m_swap.sdr == 100.0)

    def test_matches_brute_force_on_perturbed_estimates(self):
        rng = np.random.default_rng(66)
        refs = self.make_pair(67)
        ests = [refs[1] + 0.2 * rng.normal(size=2000),
                refs[0] + 0.3 * rng.normal(size=2000)]
        m = resolve_permutation(ests, refs, L1)

        best_perm, best_sir = None, -np.inf
        for perm in itertools.permutations(range(2)):
            sirs = [sdr_sir_sar(ests[i], refs, perm[i], L1)[1] for i in range(2)]
            if np.mean(sirs) > best_sir:
                best_perm, best_sir = perm, np.mean(sirs)
        assert m.permutation == best_perm == (1, 0)

    def test_symmetric_relabeling_leaves_metrics_unchanged(self):
        rng = np.random.default_rng(68)
        refs = self.make_pair(69)
        ests = [refs[0] + 0.1 * rng.normal(size=2000),
                refs[1] + 0.1 * rng.normal(size=2000)]
        m = resolve_permutation(ests, refs, L1)
        m_flipped = resolve_permutation(ests[::-1], refs[::-1], L1)
        assert sorted(m.sdr) == pytest.approx(sorted(m_flipped.sdr), abs=1e-9)

    def test_count_mismatch_rejected(self):
        with pytest.raises(ValueError, match="estimates"):
            resolve_permutation([np.ones(10)], [np.ones(10), np.ones(10)], L1)

    def test_too_many_sources_rejected(self):
        sigs = [np.random.default_rng(i).normal(size=50) for i in range(5)]
        with pytest.raises(ValueError, match="limited"):
            resolve_permutation(sigs, sigs, L1)


class TestEvaluateSet:
    @pytest.fixture(scope="class")
    def dataset(self, tmp_path_factory):
        from danet.corpus import DatasetRecipe, build_dataset, synth_corpus

        root = tmp_path_factory.mktemp("evalset")
        table = synth_corpus(root / "corpus", n_speakers=5, utts_per_speaker=4,
                             dur=1.5, seed=21)
        build_dataset(table, DatasetRecipe(train_s=9.0, valid_s=3.0, test_s=4.5,
                                           seed=21), root / "mix")
        return root / "mix" / "manifest.jsonl"

    def test_mixture_baseline_sdr_tracks_mixing_snr(self, dataset, tmp_path):
        # With the mixture as the estimate and L=1, speaker 1 scores about
        # +snr and speaker 2 about -snr (its stem carries the mixing gain).
        import csv

        from danet.bsseval import evaluate_set
        from danet.corpus import load_manifest

        out = tmp_path / "mixture.csv"
        evaluate_set(dataset, None, "mixture", L1, out)
        recs = {r.utt_id: r for r in load_manifest(dataset) if r.split == "test"}
        checked = 0
        with open(out) as fh:
            for row in csv.DictReader(fh):
                if row["utt_id"] == "MEAN":
                    continue
                rec = recs[row["utt_id"]]
                expected = rec.snr_db if row["permuted_to"] == "0" else -rec.snr_db
                assert abs(float(row["sdr_db"]) - expected) < 1.0
                checked += 1
        assert checked >= 2

    def test_oracle_report_structure(self, dataset, tmp_path):
        from danet.bsseval import evaluate_set

        out = tmp_path / "oracle.csv"
        summary = evaluate_set(dataset, None, "oracle_wfm", EvalConfig(proj_len=64), out)
        lines = out.read_text().splitlines()
        assert lines[0] == "utt_id,speaker,permuted_to,sdr_db,sir_db,sar_db,pesq"
        assert lines[-1].startswith("MEAN,")
        assert 2 * summary["count"] == len(lines) - 2  # two speakers per utterance
        assert summary["sdr"] > 5.0
