"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict that is printed in the terminal
summary. The desk run (criteria 6 to 9 and 11) is trained once per session.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_RESULTS
from dcn.checkpoint import save_checkpoint
from dcn.cli import main
from dcn.config import load_config
from dcn.data import make_synthetic_dataset, split_classes
from dcn.embedding import (
    EmbeddingColumn,
    EmbeddingConfig,
    FeatureHierarchy,
    StochasticFeature,
    parameter_checksum,
    sample_stochastic,
)
from dcn.episodes import EpisodeSpec, sample_episode
from dcn.evaluation import cross_way_evaluate, evaluate, module_correlation_matrix
from dcn.relation import RelationColumn, RelationConfig
from dcn.stats import ci95, spearman
from dcn.training import (
    TrainConfig,
    TrainedModel,
    build_embedding,
    build_relation,
    deep_supervised_loss,
    pretrain_embedding,
    train_relation,
)

pytestmark = pytest.mark.slow

DESK_INI = Path(__file__).resolve().parents[1] / "configs" / "desk.ini"
RUNTIME_LIMIT_S = 20 * 60


def verdict(n, ok, text):
    ACCEPTANCE_RESULTS[n] = (bool(ok), text)
    assert ok, f"criterion {n}: {text}"


def rel_err(a, b):
    return float((a - b).norm() / b.norm())


def central_difference(f, x, h=1e-6):
    grad = torch.zeros_like(x)
    for i in range(x.numel()):
        up, down = x.clone(), x.clone()
        up.view(-1)[i] += h
        down.view(-1)[i] -= h
        grad.view(-1)[i] = (f(up) - f(down)) / (2 * h)
    return grad


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    from dcn.training import run_pipeline

    cfg = load_config(DESK_INI)
    start = time.perf_counter()
    dataset, split = cfg.build_dataset()
    result = run_pipeline(dataset, split, cfg.embedding_config(), cfg.relation_config(), cfg.train_config())
    elapsed = time.perf_counter() - start
    report = cross_way_evaluate(result.final, dataset, split, "meta_test", cfg.eval_spec(),
                                cfg.eval.episodes, cfg.eval.seed)
    elapsed_total = time.perf_counter() - start
    return dict(cfg=cfg, dataset=dataset, split=split, result=result, report=report,
                train_seconds=elapsed, total_seconds=elapsed_total,
                tmp=tmp_path_factory.mktemp("desk"))


def test_c01_episode_protocol():
    ds = make_synthetic_dataset(12, 16, 8, 0.3, seed=1)
    split = split_classes(ds, (0.5, 0.25, 0.25), seed=1)
    rng = np.random.default_rng(2024)
    violations = 0
    for _ in range(1000):
        part = ("meta_train", "meta_val", "meta_test")[rng.integers(3)]
        classes = split.part(part)
        ways = int(rng.integers(1, len(classes) + 1))
        shots = int(rng.integers(1, 9))
        queries = int(rng.integers(1, 17 - shots))
        ep = sample_episode(ds, split, part, EpisodeSpec(ways, shots, queries), rng)
        ok = (
            len(ep.support_ids) == ways * shots
            and len(ep.query_ids) == ways * queries
            and np.bincount(ep.support_labels, minlength=ways).tolist() == [shots] * ways
            and np.bincount(ep.query_labels, minlength=ways).tolist() == [queries] * ways
            and not set(ep.support_ids) & set(ep.query_ids)
            and len(set(ep.classes)) == ways
            and all(item.label in classes for item in ep.support + ep.query)
            and all(ep.classes[l] == item.label for l, item in zip(ep.support_labels, ep.support))
        )
        violations += not ok
    verdict(1, violations == 0, f"episode invariants over 1000 random episodes: {violations} violations")


def test_c02_full_scale_shapes():
    emb_cfg = EmbeddingConfig.full_scale()
    rel_cfg = RelationConfig.for_embedding(emb_cfg)
    torch.manual_seed(0)
    emb = EmbeddingColumn(emb_cfg).eval()
    rel = RelationColumn(rel_cfg, emb_cfg).eval()
    with torch.no_grad():
        feats = emb(torch.randn(2, 3, 224, 224))
        protos = FeatureHierarchy([f[:1] for f in feats.levels])
        _, maps = rel(feats.select(slice(1, 2)), protos, return_maps=True)
    emb_sizes = [s[2] for s in feats.shapes]
    rel_sizes = [m.shape[-1] for m in maps]
    ok = emb_sizes == [56, 28, 14, 7] and rel_sizes == [28, 14, 7, 7]
    verdict(2, ok, f"embedding sizes {emb_sizes}, relation sizes {rel_sizes}")


def test_c03_reparameterisation_gradients():
    g = torch.Generator().manual_seed(3)
    mean = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    pre = torch.randn(2, 1, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(2, 1, 4, 4, generator=g, dtype=torch.float64)
    coef = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)

    def loss(m, p):
        out = sample_stochastic(StochasticFeature(m, torch.sigmoid(p)), eps)
        return (coef * torch.tanh(out)).sum()

    m, p = mean.clone().requires_grad_(True), pre.clone().requires_grad_(True)
    loss(m, p).backward()
    e_mean = rel_err(m.grad, central_difference(lambda x: loss(x, pre), mean))
    e_pre = rel_err(p.grad, central_difference(lambda x: loss(mean, x), pre))
    zero = sample_stochastic(StochasticFeature(mean, torch.sigmoid(pre)), torch.zeros_like(eps))
    ok = e_mean <= 1e-5 and e_pre <= 1e-5 and torch.equal(zero, mean)
    verdict(3, ok, f"rel err mean {e_mean:.2e}, std pre-activation {e_pre:.2e}, eps=0 exact {torch.equal(zero, mean)}")


def test_c04_loss_oracle():
    w = [0.3, 0.4, 0.5, 1.0]
    value = float(deep_supervised_loss(torch.full((1, 4), 0.5, dtype=torch.float64), [1], w))
    err = abs(value - 2.2 * math.log(2))
    g = torch.Generator().manual_seed(4)
    pre = torch.randn(8, 4, generator=g, dtype=torch.float64)
    labels = torch.tensor([1, 0, 0, 0, 1, 0, 1, 1])

    def f(x):
        return deep_supervised_loss(torch.sigmoid(x), labels, w)

    x = pre.clone().requires_grad_(True)
    f(x).backward()
    grad_err = rel_err(x.grad, central_difference(f, pre))
    verdict(4, err <= 1e-9 and grad_err <= 1e-5, f"|loss - 2.2 ln 2| = {err:.1e}, gradient rel err {grad_err:.2e}")


def test_c05_freeze_and_reproducibility():
    ds = make_synthetic_dataset(10, 16, 32, 0.3, seed=5)
    split = split_classes(ds, (0.6, 0.2, 0.2), seed=5)
    ds = ds.recentered(split.meta_train)
    emb_cfg = EmbeddingConfig(blocks_per_stage=[1, 1, 1, 1])
    rel_cfg = RelationConfig.for_embedding(emb_cfg, blocks_per_stage=1)
    tc = TrainConfig(pretrain_epochs=2, relation_episodes=12, eval_every=4, val_episodes=4, train_queries=3)
    runs = []
    frozen = True
    for _ in range(2):
        emb, h1 = pretrain_embedding(ds, split.meta_train, emb_cfg, tc)
        before = parameter_checksum(emb)
        _, best, h2 = train_relation(ds, split.meta_train, split.meta_val, emb, rel_cfg, tc)
        frozen &= parameter_checksum(emb) == before
        runs.append((h1, h2, best, before))
    same = runs[0] == runs[1]
    verdict(5, frozen and same, f"embedding unchanged by relation training {frozen}, identical histories {same}")


def test_c06_desk_run(desk_run):
    acc = desk_run["report"].mean_accuracy
    secs = desk_run["total_seconds"]
    ok = acc >= 0.90 and secs <= RUNTIME_LIMIT_S
    verdict(6, ok, f"5-way 1-shot over {desk_run['report'].num_episodes} episodes: "
                   f"{desk_run['report'].summary()}, runtime {secs / 60:.1f} min")


def test_c07_module_ablation(desk_run):
    r = desk_run["report"]
    per = r.per_module_accuracy
    ok = all(a > 0.2 + 0.20 for a in per) and r.mean_accuracy >= max(per) - 0.05
    text = ", ".join(f"RM{v + 1} {a:.3f}" for v, a in enumerate(per))
    verdict(7, ok, f"{text}; combined {r.mean_accuracy:.3f}")


def test_c08_cross_way(desk_run):
    d = desk_run
    report = cross_way_evaluate(d["result"].final, d["dataset"], d["split"], "meta_test",
                                EpisodeSpec(10, 1, 15), 100, 1)
    verdict(8, report.mean_accuracy >= 0.25, f"10-way 1-shot without retraining: {report.summary()}")


def _brute_spearman(a, b):
    def ranks(x):
        return [sum(u < v for u in x) + (sum(u == v for u in x) + 1) / 2 for v in x]

    ra, rb = ranks(a), ranks(b)
    ma, mb = sum(ra) / len(ra), sum(rb) / len(rb)
    num = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    return num / math.sqrt(sum((x - ma) ** 2 for x in ra) * sum((y - mb) ** 2 for y in rb))


def test_c09_spearman(desk_run):
    rng = np.random.default_rng(9)
    worst, done = 0.0, 0
    while done < 20:
        a, b = rng.integers(0, 10, 7).tolist(), rng.integers(0, 10, 7).tolist()
        if len(set(a)) > 1 and len(set(b)) > 1:
            worst = max(worst, abs(spearman(a, b) - _brute_spearman(a, b)))
            done += 1
    x = rng.random(7).tolist()
    ordered = sorted(x)
    extremes = spearman(x, x) == 1.0 and spearman(ordered, ordered[::-1]) == spearman(x, [-v for v in x]) == -1.0
    d = desk_run
    corr = module_correlation_matrix(d["result"].final, d["dataset"], d["split"], "meta_test",
                                     EpisodeSpec(5, 1, 15), 750, 0)
    diag = bool(np.all(np.diag(corr.matrix) == 1.0))
    verdict(9, worst <= 1e-12 and extremes and diag,
            f"max deviation from brute force {worst:.1e}, extremes {extremes}, unit diagonal {diag}")


class _Oracle:
    weights = [0.3, 0.4, 0.5, 1.0]

    def level_scores(self, episode):
        return np.repeat(np.eye(episode.ways)[episode.query_labels][:, :, None], 4, axis=2)


def test_c10_statistics(desk_run):
    d = desk_run
    spec = EpisodeSpec(5, 1, 15)
    oracle = evaluate(_Oracle(), d["dataset"], d["split"], "meta_test", spec, 100, 0)
    cfg = d["cfg"]
    # the run's own initialisation, i.e. the model right before pretraining
    seed = cfg.train.seed
    emb = build_embedding(cfg.embedding_config(), seed).eval()
    rel = build_relation(cfg.relation_config(), emb.config, seed).eval()
    untrained = TrainedModel(emb, rel, emb.config, cfg.relation_config())
    chance = evaluate(untrained, d["dataset"], d["split"], "meta_test", spec, 600, 0).mean_accuracy
    xs = [0.6, 0.8, 0.7, 0.9, 0.5]
    by_hand = 1.96 * math.sqrt(0.025) / math.sqrt(5)
    ci_err = abs(ci95(xs) - by_hand)
    ok = oracle.mean_accuracy == 1.0 and oracle.ci95 == 0.0 and 0.17 <= chance <= 0.23 and ci_err <= 1e-12
    verdict(10, ok, f"oracle {oracle.mean_accuracy} ± {oracle.ci95}, untrained 5-way {chance:.3f}, "
                    f"ci95 error {ci_err:.1e}")


def test_c11_eval_artifacts_are_deterministic(desk_run):
    tmp = desk_run["tmp"]
    model = desk_run["result"].final
    model.meta["experiment"] = DESK_INI.read_text()
    save_checkpoint(model, tmp / "final.ckpt")
    outs = []
    for k in range(2):
        out = tmp / f"eval{k}"
        args = ["eval", "--checkpoint", str(tmp / "final.ckpt"), "--episodes", "20", "--seed", "7",
                "--analyses", "modules,correlation,scatter", "--pairs", "300", "--out", str(out)]
        assert main(args) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outs[0] == outs[1] and len(outs[0]) == 5
    verdict(11, same, f"{len(outs[0])} files byte-identical across two eval runs: {same}")
