"""Evaluation metrics: confusion-matrix detection scores and caption scores.

Detection metrics aggregate one confusion matrix over the whole split and
score it once, so sample order never matters.  Degenerate 0/0 ratios resolve
to 0 and set a ``degenerate`` flag instead of raising.

Caption metrics use one fixed tokenizer (lowercase, punctuation to spaces,
whitespace split) so scores are reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import string
from collections import Counter

import numpy as np

_PUNCT_TABLE = str.maketrans({ch: " " for ch in string.punctuation})


class ConfusionMatrix:
    """Square count matrix; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(counts, dtype=np.int64)
            if self.counts.shape != (num_classes, num_classes):
                raise ValueError(f"counts must be {num_classes}x{num_classes}")
            if (self.counts < 0).any():
                raise ValueError("negative counts")

    def update(self, gt: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        gt = np.asarray(gt).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        if gt.shape != pred.shape:
            raise ValueError("gt/pred size mismatch")
        n = self.num_classes
        if gt.size:
            self.counts += np.bincount(
                gt.astype(np.int64) * n + pred.astype(np.int64), minlength=n * n
            ).reshape(n, n)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _safe_div(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def binary_metrics(cm: ConfusionMatrix) -> dict:
    """F1/IoU/OA/precision/recall of the positive class of a 2x2 matrix."""
    if cm.num_classes != 2:
        raise ValueError("binary_metrics needs a 2x2 matrix")
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    c = cm.counts
    tn, fp, fn, tp = int(c[0, 0]), int(c[0, 1]), int(c[1, 0]), int(c[1, 1])
    precision, d1 = _safe_div(tp, tp + fp)
    recall, d2 = _safe_div(tp, tp + fn)
    f1, d3 = _safe_div(2 * precision * recall, precision + recall)
    iou, d4 = _safe_div(tp, tp + fp + fn)
    oa = (tp + tn) / cm.total
    return {"F1": f1, "IoU": iou, "OA": oa, "precision": precision,
            "recall": recall, "degenerate": d1 or d2 or d3 or d4}


def _kappa(counts: np.ndarray) -> tuple[float, bool]:
    total = counts.sum()
    if total == 0:
        return 0.0, True
    po = np.trace(counts) / total
    pe = float((counts.sum(axis=1) * counts.sum(axis=0)).sum()) / (total * total)
    if pe >= 1.0:
        return 0.0, True
    return (po - pe) / (1.0 - pe), False


def scd_metrics(cm: ConfusionMatrix) -> dict:
    """Semantic-change scores over an (S+1)-state matrix, state 0 = no-change.

    mIoU averages the IoU of the unchanged and changed regions.  SeK damps
    Cohen's kappa of the matrix with the (0,0) cell zeroed by
    exp(IoU_change - 1).  F_scd counts a changed pixel correct only when its
    semantic state matches.
    """
    c = cm.counts.astype(np.float64)
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    iou_nc, d1 = _safe_div(c[0, 0], c[0, :].sum() + c[:, 0].sum() - c[0, 0])
    tp_c = c[1:, 1:].sum()
    fp_c = c[0, 1:].sum()
    fn_c = c[1:, 0].sum()
    iou_c, d2 = _safe_div(tp_c, tp_c + fp_c + fn_c)
    miou = 0.5 * (iou_nc + iou_c)

    zeroed = c.copy()
    zeroed[0, 0] = 0.0
    kappa, dk = _kappa(zeroed)
    sek = 0.0 if dk else float(np.exp(iou_c - 1.0) * kappa)

    tp_sem = np.trace(c) - c[0, 0]
    pred_changed = c[:, 1:].sum()
    gt_changed = c[1:, :].sum()
    p_scd, d3 = _safe_div(tp_sem, pred_changed)
    r_scd, d4 = _safe_div(tp_sem, gt_changed)
    f_scd, d5 = _safe_div(2 * p_scd * r_scd, p_scd + r_scd)
    oa = np.trace(c) / cm.total
    return {"mIoU": miou, "SeK": sek, "F_scd": f_scd, "OA": oa,
            "kappa": kappa, "IoU_change": iou_c, "IoU_nochange": iou_nc,
            "degenerate": d1 or d2 or dk or d3 or d4 or d5}


def bda_metrics(loc_cm: ConfusionMatrix, dmg_cm: ConfusionMatrix) -> dict:
    """Damage-assessment scores.

    ``loc_cm`` is the binary building-localization matrix over all pixels;
    ``dmg_cm`` is the 4x4 damage matrix restricted to ground-truth building
    pixels.  F1_cls is the harmonic mean of the per-class damage F1s
    (ground-truth-absent classes are excluded and flagged); the overall score
    is 0.3*F1_loc + 0.7*F1_cls.
    """
    if dmg_cm.num_classes != 4:
        raise ValueError("damage matrix must be 4x4")
    loc = binary_metrics(loc_cm)
    c = dmg_cm.counts.astype(np.float64)
    per_class = []
    excluded = []
    for k in range(4):
        tp = c[k, k]
        fp = c[:, k].sum() - tp
        fn = c[k, :].sum() - tp
        if c[k, :].sum() == 0:
            per_class.append(0.0)
            excluded.append(k)
            continue
        p, _ = _safe_div(tp, tp + fp)
        r, _ = _safe_div(tp, tp + fn)
        f1, _ = _safe_div(2 * p * r, p + r)
        per_class.append(f1)
    present = [f for k, f in enumerate(per_class) if k not in excluded]
    if not present:
        f1_cls, dcls = 0.0, True
    elif any(f == 0.0 for f in present):
        f1_cls, dcls = 0.0, False  # harmonic mean collapses
    else:
        f1_cls = len(present) / sum(1.0 / f for f in present)
        dcls = False
    f1_overall = 0.3 * loc["F1"] + 0.7 * f1_cls
    return {"F1_loc": loc["F1"], "F1_cls": f1_cls, "F1_overall": f1_overall,
            "damage_F1_per_class": per_class, "excluded_classes": excluded,
            "degenerate": loc["degenerate"] or dcls}


# ---------------------------------------------------------------------------
# caption metrics

def tokenize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT_TABLE).split()


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n: int = 4) -> float:
    """Corpus BLEU: geometric mean of clipped n-gram precisions up to max_n,
    times the brevity penalty (closest reference length, ties to shorter)."""
    if not candidates:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    clipped = np.zeros(max_n)
    totals = np.zeros(max_n)
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            if not counts:
                continue
            max_ref = Counter()
            for r in refs:
                for gram, cnt in _ngrams(r, n).items():
                    if cnt > max_ref[gram]:
                        max_ref[gram] = cnt
            totals[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(cnt, max_ref[g]) for g, cnt in counts.items())
    if (totals == 0).any() or (clipped == 0).any():
        return 0.0
    log_prec = np.log(clipped / totals).mean()
    bp = 1.0 if cand_len > ref_len else float(np.exp(1.0 - ref_len / max(cand_len, 1)))
    return float(bp * np.exp(log_prec))


def _lcs_len(a, b) -> int:
    dp = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i, ai in enumerate(a):
        for j, bj in enumerate(b):
            dp[i + 1, j + 1] = dp[i, j] + 1 if ai == bj else max(dp[i, j + 1], dp[i + 1, j])
    return int(dp[len(a), len(b)])


def rouge_l(candidates, references, beta: float = 1.2) -> float:
    """Mean over samples of the best LCS F-measure against any reference."""
    scores = []
    for cand, refs in zip(candidates, references):
        best = 0.0
        for r in refs:
            if not cand or not r:
                continue
            lcs = _lcs_len(cand, r)
            prec = lcs / len(cand)
            rec = lcs / len(r)
            if prec and rec:
                best = max(best, (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec))
        scores.append(best)
    return float(np.mean(scores)) if scores else 0.0


def _align_greedy(cand, ref):
    """First-fit exact unigram alignment: candidate position -> reference
    position, each reference token used at most once."""
    used = [False] * len(ref)
    pairs = []
    for i, w in enumerate(cand):
        for j, r in enumerate(ref):
            if not used[j] and r == w:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def _chunks(pairs) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(candidates, references) -> float:
    """Exact-match METEOR without stemming or synonyms.

    F_mean = 10PR/(R+9P); fragmentation penalty 0.5*(chunks/matches)^3;
    score = F_mean*(1-penalty), best reference taken per sample.
    """
    scores = []
    for cand, refs in zip(candidates, references):
        best = 0.0
        for ref in refs:
            pairs = _align_greedy(cand, ref)
            m = len(pairs)
            if m == 0 or not cand or not ref:
                continue
            p = m / len(cand)
            r = m / len(ref)
            f_mean = 10 * p * r / (r + 9 * p)
            penalty = 0.5 * (_chunks(pairs) / m) ** 3
            best = max(best, f_mean * (1 - penalty))
        scores.append(best)
    return float(np.mean(scores)) if scores else 0.0


def cider(candidates, references) -> tuple[float, bool]:
    """TF-IDF n-gram consensus: mean over n of 1..4 of 10 x the average cosine
    similarity against each reference.  IDF comes from the reference corpus;
    a single-document corpus is degenerate (flagged)."""
    n_docs = len(references)
    if n_docs == 0:
        raise ValueError("empty corpus")
    degenerate = n_docs < 2
    score_total = 0.0
    for n in range(1, 5):
        df = Counter()
        for refs in references:
            grams = set()
            for r in refs:
                grams.update(_ngrams(r, n).keys())
            df.update(grams)

        def tfidf(tokens):
            # idf = log(N) - log(max(df, 1)); grams unseen in the reference
            # corpus keep full weight in the candidate norm
            counts = _ngrams(tokens, n)
            length = max(sum(counts.values()), 1)
            return {g: (c / length) * (np.log(n_docs) - np.log(max(df[g], 1)))
                    for g, c in counts.items()}

        sims = []
        for cand, refs in zip(candidates, references):
            vc = tfidf(cand)
            norm_c = np.sqrt(sum(v * v for v in vc.values()))
            acc = 0.0
            for r in refs:
                vr = tfidf(r)
                norm_r = np.sqrt(sum(v * v for v in vr.values()))
                if norm_c == 0 or norm_r == 0:
                    continue
                dot = sum(v * vr.get(g, 0.0) for g, v in vc.items())
                acc += dot / (norm_c * norm_r)
            sims.append(10.0 * acc / len(refs))
        score_total += float(np.mean(sims))
    return score_total / 4.0, degenerate


def caption_metrics(candidates, references) -> dict:
    """All caption scores; inputs are token lists (one candidate and >=1
    references per sample)."""
    out = {}
    for n in range(1, 5):
        out[f"BLEU-{n}"] = bleu(candidates, references, n)
    out["ROUGE-L"] = rouge_l(candidates, references)
    out["METEOR-lite"] = meteor_lite(candidates, references)
    cd, degenerate = cider(candidates, references)
    out["CIDEr"] = cd
    out["CIDEr_degenerate"] = degenerate
    return out


def report_json(metrics: dict) -> str:
    return json.dumps({k: v for k, v in metrics.items()}, indent=2, default=float)


def report_table(metrics: dict) -> str:
    width = max(len(k) for k in metrics)
    lines = []
    for k, v in metrics.items():
        if isinstance(v, float):
            lines.append(f"{k:<{width}}  {v:.4f}")
        else:
            lines.append(f"{k:<{width}}  {v}")
    return "\n".join(lines)
