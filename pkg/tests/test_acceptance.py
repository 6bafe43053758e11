"""Full acceptance run: gradients, oracle equivalences, baselines, orderings, determinism.

The expensive fixtures (default 20k-episode training, the 10-stream benchmark)
are built once per module; everything downstream shares them.  Each criterion
test emits one PASS/FAIL line that the run summary collects.
"""

import itertools
import time

import numpy as np
import pytest

from cmpem import autodiff, diarization, inference, nets, synth, training
from cmpem.cli import main
from cmpem.config import RunConfig
from cmpem.diarization import der_score, diarize
from cmpem.inference import (CompositionalPredictor, GuessPredictor,
                             SingleEmPredictor, build_enrollment_table,
                             infer_from_embedding, infer_set)
from cmpem.nets import CMPEM, CMPEML2, compose_pair, embed_example
from cmpem.seeding import derive_rng, derive_seed_sequence
from cmpem.synth import Timeline
from cmpem.training import TrainConfig

CFG = RunConfig()


@pytest.fixture(scope="module")
def train_bank():
    return synth.make_bank(CFG.train_speakers, CFG.feature_dim, CFG.within_speaker_noise,
                           derive_seed_sequence(CFG.seed, "bank-train"))


@pytest.fixture(scope="module")
def trained_cmpem(train_bank):
    model = nets.init_compositional_model(CFG.feature_dim, CFG.hidden_dim, CFG.embed_dim,
                                          CMPEM, derive_rng(CFG.seed, "init-model"))
    return training.train(model, train_bank, TrainConfig()).model


@pytest.fixture(scope="module")
def trained_singleem(train_bank):
    return training.train_single_embedding(train_bank, TrainConfig()).model


@pytest.fixture(scope="module")
def eval_report(trained_cmpem, trained_singleem):
    bank = synth.make_bank(CFG.eval_speakers, CFG.feature_dim, CFG.within_speaker_noise,
                           derive_seed_sequence(CFG.seed, "bank-eval"))
    episodes = [synth.sample_episode(bank, derive_rng(CFG.seed, f"test-episode-{i}"))
                for i in range(CFG.episodes_test)]
    predictors = {
        "cmpem": CompositionalPredictor(trained_cmpem),
        "singleem": SingleEmPredictor(trained_singleem),
        "guess": GuessPredictor(derive_rng(CFG.seed, "guess")),
    }
    return inference.evaluate_episode_batch(predictors, episodes)


def test_criterion_1_gradient_correctness(record_criterion):
    start = time.perf_counter()
    checks = autodiff.run_gradcheck(seed=CFG.seed, h=CFG.gradcheck_step,
                                    tolerance=CFG.gradcheck_tolerance)
    net_error = autodiff.gradient_check_network(seed=CFG.seed, h=CFG.gradcheck_step)
    elapsed = time.perf_counter() - start
    worst = max([c.max_rel_error for c in checks] + [net_error])
    ok = all(c.passed for c in checks) and worst < 1e-4 and elapsed < 30.0
    record_criterion("criterion 1 gradient correctness", ok,
                     f"max rel err {worst:.2e} over {len(checks)} ops + network, {elapsed:.1f}s")


def exhaustive_oracle(table, query_embedding):
    """Re-derive the nearest subset by brute force, sharing nothing with infer_set."""
    q = np.asarray(query_embedding, dtype=np.float64)
    q = q / np.sqrt(np.sum(q * q))
    best = None
    for key in sorted(table.entries, key=lambda k: (len(k), k)):
        v = np.asarray(table.entries[key], dtype=np.float64)
        v = v / np.sqrt(np.sum(v * v))
        d = float(np.sum((q - v) ** 2))
        if best is None or d < best[0]:
            best = (d, key)
    return best[1]


def test_criterion_2_inference_matches_exhaustive_oracle(record_criterion):
    bank = synth.make_bank(30, CFG.feature_dim, CFG.within_speaker_noise,
                           derive_seed_sequence(CFG.seed, "bank-eval"))
    models = [
        nets.init_compositional_model(CFG.feature_dim, CFG.hidden_dim, CFG.embed_dim,
                                      CMPEM, np.random.default_rng(11)),
        nets.init_compositional_model(CFG.feature_dim, CFG.hidden_dim, CFG.embed_dim,
                                      CMPEML2, np.random.default_rng(12)),
    ]
    checked = 0
    mismatches = 0
    for m, model in enumerate(models):
        for i in range(20):
            episode = synth.sample_episode(bank, np.random.default_rng(1000 * m + i))
            table = build_enrollment_table(model, episode.enrollments, episode.max_card)
            for x, label in episode.examples:
                predicted = infer_set(model, table, x).predicted
                expected = exhaustive_oracle(table, embed_example(model, x))
                mismatches += predicted != expected
                checked += 1
    ok = checked >= 1000 and mismatches == 0
    record_criterion("criterion 2 inference vs exhaustive oracle", ok,
                     f"{mismatches} mismatches over {checked} examples")


def brute_force_breakdown(ref, hyp):
    """DER components from an explicit search over every one-to-one speaker mapping."""
    fd = ref.frame_duration
    rids = sorted(set().union(*ref.frames)) if ref.frames else []
    hids = sorted(set().union(*hyp.frames)) if hyp.frames else []
    miss = sum(max(len(R) - len(H), 0) for R, H in zip(ref.frames, hyp.frames))
    fa = sum(max(len(H) - len(R), 0) for R, H in zip(ref.frames, hyp.frames))

    def total_error(mapping):
        err = 0
        for R, H in zip(ref.frames, hyp.frames):
            mapped = {mapping[h] for h in H if h in mapping}
            err += max(len(R), len(H)) - len(set(R) & mapped)
        return err

    k = min(len(rids), len(hids))
    candidates = []
    if len(hids) <= len(rids):
        candidates = [dict(zip(hids, chosen)) for chosen in itertools.permutations(rids, k)]
    else:
        candidates = [dict(zip(chosen, rids)) for chosen in itertools.permutations(hids, k)]
    best = min((total_error(m) for m in candidates), default=total_error({}))
    total = sum(len(R) for R in ref.frames)
    return (miss * fd, fa * fd, (best - miss - fa) * fd, total * fd)


def test_criterion_3_der_matches_all_mappings_scorer(record_criterion):
    rng = np.random.default_rng(2024)

    def random_timeline(ids, n_frames):
        frames = []
        for _ in range(n_frames):
            n = int(rng.integers(0, min(3, len(ids)) + 1))
            frames.append(frozenset(int(s) for s in rng.choice(ids, size=n, replace=False)))
        return Timeline(0.1, frames)

    exact = 0
    for case in range(200):
        n_frames = int(rng.integers(10, 70))
        ref = random_timeline(list(range(int(rng.integers(1, 7)))), n_frames)
        n_hyp = int(rng.integers(0, 7))
        hyp = random_timeline([50 + s for s in range(n_hyp)], n_frames) if n_hyp \
            else Timeline(0.1, [frozenset()] * n_frames)
        b = der_score(ref, hyp)
        exact += (b.miss, b.false_alarm, b.confusion,
                  b.total_reference_speech) == brute_force_breakdown(ref, hyp)

    perm = der_score(Timeline(0.1, [frozenset({0}), frozenset({1}), frozenset({0, 1})]),
                     Timeline(0.1, [frozenset({7}), frozenset({3}), frozenset({7, 3})]))
    empty = der_score(Timeline(0.1, [frozenset({0})] * 10),
                      Timeline(0.1, [frozenset()] * 10))
    hand = der_score(Timeline(0.1, [frozenset({0})] * 10),
                     Timeline(0.1, [frozenset({5})] * 8 + [frozenset({6}), frozenset()]))
    fixtures_ok = perm.der == 0.0 and empty.der == 1.0 and hand.der == 2.0 / 10.0
    ok = exact == 200 and fixtures_ok
    record_criterion("criterion 3 DER vs all-mappings scorer", ok,
                     f"{exact}/200 randomized timelines exact; "
                     f"fixtures {perm.der:g}/{empty.der:g}/{hand.der:g}")


def test_criterion_4_guess_baseline_analytics(record_criterion, eval_report):
    guess = eval_report.per_model["guess"]
    rows = {
        "set id": (100 * guess.overall, 4.0),
        "size": (100 * guess.size, 36.0),
        "oracle k=1": (100 * guess.oracle_by_card[1], 20.0),
        "oracle k=2": (100 * guess.oracle_by_card[2], 10.0),
        "oracle k=3": (100 * guess.oracle_by_card[3], 10.0),
    }
    ok = eval_report.n_examples >= 10000 and all(
        abs(got - want) <= 1.5 for got, want in rows.values())
    detail = ", ".join(f"{name} {got:.1f} vs {want:.1f}" for name, (got, want) in rows.items())
    record_criterion("criterion 4 guess-baseline analytics", ok,
                     f"{detail} over {eval_report.n_examples} trials")


def test_criterion_5_identification_ordering(record_criterion, eval_report):
    cmpem = eval_report.per_model["cmpem"].overall
    single = eval_report.per_model["singleem"].overall
    guess = eval_report.per_model["guess"].overall
    ok = cmpem > single > guess and cmpem >= 2 * single and single >= 3 * guess
    record_criterion("criterion 5 identification ordering", ok,
                     f"cmpem {cmpem:.4f} vs singleem {single:.4f} vs guess {guess:.4f}")
    single_k1 = eval_report.per_model["singleem"].oracle_by_card[1]
    cmpem_k1 = eval_report.per_model["cmpem"].oracle_by_card[1]
    record_criterion("criterion 5 note on the oracle-k=1 stratum",
                     single_k1 >= cmpem_k1,
                     f"singleem {single_k1:.4f} vs cmpem {cmpem_k1:.4f}; larger corpora "
                     f"favor the baseline here, this synthetic setup does not", gate=False)


def test_criterion_6_diarization_ordering(record_criterion, trained_cmpem, trained_singleem):
    start = time.perf_counter()
    ders = {name: [] for name in diarization.STRATEGIES}
    for k in range(CFG.n_streams):
        bank = synth.make_bank(CFG.stream_speakers, CFG.feature_dim, CFG.within_speaker_noise,
                               derive_seed_sequence(CFG.seed, f"stream-bank-{k}"))
        stream = synth.generate_stream(bank, CFG.stream_speakers, CFG.stream_duration_s,
                                       derive_rng(CFG.seed, f"stream-{k}"),
                                       overlap_fraction=CFG.overlap_fraction)
        for strategy in diarization.STRATEGIES:
            model = trained_singleem if strategy.startswith("single") else trained_cmpem
            hyp = diarize(stream, model, strategy,
                          detector_rng=derive_rng(CFG.seed, f"detector-{k}-{strategy}"))
            ders[strategy].append(der_score(stream.timeline, hyp).der)
    elapsed = time.perf_counter() - start
    mean = {name: float(np.mean(vals)) for name, vals in ders.items()}
    turn = mean[diarization.SINGLEEM_TURN]
    sso = mean[diarization.SINGLEEM_SEG_OVERLAP]
    cso = mean[diarization.CMPEM_SEG_OVERLAP]
    cs = mean[diarization.CMPEM_SEG]
    ok = (cso <= sso and turn - sso >= 0.03 and turn - cso >= 0.03
          and cs < turn and elapsed < 900.0)
    record_criterion("criterion 6 diarization ordering", ok,
                     f"mean DER turn {turn:.4f}, seg+det {sso:.4f}, cmp seg {cs:.4f}, "
                     f"cmp seg+det {cso:.4f} over {CFG.n_streams} streams, {elapsed:.0f}s")


def test_criterion_7_composition_algebra(record_criterion):
    rng = np.random.default_rng(31)
    models = {
        CMPEM: nets.init_compositional_model(CFG.feature_dim, CFG.hidden_dim, CFG.embed_dim,
                                             CMPEM, np.random.default_rng(41)),
        CMPEML2: nets.init_compositional_model(CFG.feature_dim, CFG.hidden_dim, CFG.embed_dim,
                                               CMPEML2, np.random.default_rng(42)),
    }
    commutative = 0
    for variant, model in models.items():
        for _ in range(5000):
            ea = rng.standard_normal(CFG.embed_dim)
            eb = rng.standard_normal(CFG.embed_dim)
            commutative += np.array_equal(compose_pair(model, ea, eb),
                                          compose_pair(model, eb, ea))

    worst_norm = 0.0
    bank = synth.make_bank(12, CFG.feature_dim, CFG.within_speaker_noise,
                           derive_seed_sequence(CFG.seed, "bank-eval"))
    for i in range(40):
        episode = synth.sample_episode(bank, np.random.default_rng(500 + i))
        table = build_enrollment_table(models[CMPEML2], episode.enrollments, episode.max_card)
        for v in table.entries.values():
            worst_norm = max(worst_norm, abs(float(np.linalg.norm(v)) - 1.0))
        for x, _ in episode.examples:
            e = embed_example(models[CMPEML2], x)
            worst_norm = max(worst_norm, abs(float(np.linalg.norm(e)) - 1.0))

    scale_stable = 0
    scale_total = 0
    raw = models[CMPEM]
    for i in range(8):
        episode = synth.sample_episode(bank, np.random.default_rng(700 + i))
        table = build_enrollment_table(raw, episode.enrollments, episode.max_card)
        for x, _ in episode.examples:
            e = embed_example(raw, x)
            base = infer_from_embedding(table, e).predicted
            for c in (1e-3, 7.0, 1e4):
                scaled = inference.EnrollmentTable(
                    {k: c * v for k, v in table.entries.items()}, table.max_card)
                scale_stable += infer_from_embedding(scaled, c * e).predicted == base
                scale_total += 1

    ok = commutative == 10000 and worst_norm <= 1e-9 and scale_stable == scale_total
    record_criterion("criterion 7 composition algebra", ok,
                     f"{commutative}/10000 pairs bit-commutative, unit-norm drift "
                     f"{worst_norm:.1e}, {scale_stable}/{scale_total} scale-stable predictions")


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_rerun_determinism(record_criterion, tmp_path):
    shrink = ["--set", "feature_dim=12", "--set", "hidden_dim=16", "--set", "embed_dim=6",
              "--set", "train_speakers=8", "--set", "eval_speakers=8",
              "--set", "episodes_train=25", "--set", "episodes_val=8",
              "--set", "val_every=10", "--set", "episodes_test=10",
              "--set", "n_streams=2", "--set", "stream_duration_s=60",
              "--set", "stream_speakers=3"]
    model_dir = tmp_path / "m"
    assert main(["train", "--variant", "cmpem", "--out", str(model_dir), *shrink]) == 0
    assert main(["train", "--variant", "singleem", "--out", str(tmp_path / "s"), *shrink]) == 0
    cm, sm = str(model_dir / "model_best.txt"), str(tmp_path / "s" / "model_best.txt")

    commands = {
        "train": ["train", "--variant", "cmpeml2", *shrink],
        "eval": ["eval", "--cmpem", cm, "--singleem", sm, *shrink],
        "diarize": ["diarize", "--cmpem", cm, "--singleem", sm, "--dump-rttm", *shrink],
        "gradcheck": ["gradcheck"],
    }
    identical = []
    for name, argv in commands.items():
        a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        assert main([*argv, "--out", str(a)]) == 0
        assert main([*argv, "--out", str(b)]) == 0
        identical.append(tree_bytes(a) == tree_bytes(b))
    ok = all(identical)
    record_criterion("criterion 8 rerun determinism", ok,
                     "byte-identical artifacts for " +
                     ", ".join(f"{n}={'yes' if i else 'NO'}"
                               for n, i in zip(commands, identical)))
