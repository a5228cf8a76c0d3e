"""Gradient word importance, attention weights, and their rank agreement."""

from __future__ import annotations

import html
import json
import math
import statistics
from dataclasses import dataclass, field

import torch

from .errors import InvalidArgument

REDUCTIONS = ("grad_x_input", "grad_l2")


@dataclass
class SaliencyMap:
    values: list[list[float]]  # per example, masked-in positions only
    classes: list[int]
    reduction: str


@dataclass
class AttributionReport:
    tokens: list[str]
    grad_importance: list[float]
    attention: list[float]
    tau: float | None
    predicted_class: int
    label: int | None = None

    def to_json(self) -> dict:
        return {
            "tokens": self.tokens,
            "grad_importance": self.grad_importance,
            "attention": self.attention,
            "tau": self.tau,
            "predicted_class": self.predicted_class,
            "label": self.label,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttributionReport":
        return cls(
            list(obj["tokens"]),
            [float(x) for x in obj["grad_importance"]],
            [float(x) for x in obj["attention"]],
            None if obj.get("tau") is None else float(obj["tau"]),
            int(obj["predicted_class"]),
            obj.get("label"),
        )


@dataclass
class AgreementSummary:
    n_examples: int
    n_scored: int
    skipped: int
    mean_tau: float | None
    median_tau: float | None
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "n_scored": self.n_scored,
            "skipped": self.skipped,
            "mean_tau": self.mean_tau,
            "median_tau": self.median_tau,
            "per_class": self.per_class,
        }


# --- Kendall tau-b ---------------------------------------------------------


def _tie_pairs(sorted_values) -> int:
    total, run = 0, 1
    for prev, cur in zip(sorted_values, sorted_values[1:]):
        if cur == prev:
            run += 1
        else:
            total += run * (run - 1) // 2
            run = 1
    return total + run * (run - 1) // 2


def _count_inversions(values: list) -> int:
    """Strict inversions (i < j, v[i] > v[j]) by bottom-up merge sort."""
    arr = list(values)
    n = len(arr)
    buf = [None] * n
    inversions, width = 0, 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid, hi = min(lo + width, n), min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if arr[j] < arr[i]:
                    buf[k] = arr[j]
                    inversions += mid - i
                    j += 1
                else:
                    buf[k] = arr[i]
                    i += 1
                k += 1
            buf[k:hi] = arr[i:mid] + arr[j:hi]
        arr, buf = buf, arr
        width *= 2
    return inversions


def kendall_tau(r1, r2) -> float:
    """Tie-corrected Kendall tau-b in O(n log n) (Knight's method).

    Pair counts are exact integers; returns NaN when either ranking is
    constant, since tau-b is undefined there.
    """
    x, y = [float(v) for v in r1], [float(v) for v in r2]
    if len(x) != len(y):
        raise InvalidArgument(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 2:
        raise InvalidArgument("kendall_tau needs at least two observations")
    if any(math.isnan(v) for v in x + y):
        raise InvalidArgument("kendall_tau inputs must not contain NaN")

    pairs = sorted(zip(x, y))
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs([p[0] for p in pairs])
    n3 = _tie_pairs(pairs)  # joint ties
    swaps = _count_inversions([p[1] for p in pairs])
    n2 = _tie_pairs(sorted(y))
    # concordant - discordant
    s = n0 - n1 - n2 + n3 - 2 * swaps
    a, b = n0 - n1, n0 - n2
    if a == 0 or b == 0:
        return math.nan
    return s / math.sqrt(a * b)


# --- importance ------------------------------------------------------------


def saliency_from_embeddings(fn, embedded, mask, classes, reduction="grad_x_input"):
    """Per-token importance of ``fn(embedded)[:, c]`` with respect to each
    token's embedding. Returns ``(importance (B, T), raw gradient)``."""
    if reduction not in REDUCTIONS:
        raise InvalidArgument(f"unknown reduction {reduction!r}")
    emb = embedded.detach().requires_grad_(True)
    probs = fn(emb)
    selected = probs.gather(1, classes.view(-1, 1)).sum()
    (g,) = torch.autograd.grad(selected, emb)
    if reduction == "grad_x_input":
        imp = (g * emb.detach()).sum(-1).abs()
    else:
        imp = g.norm(dim=-1)
    return imp.masked_fill(~mask, 0.0), g


def _trim(matrix, lengths) -> list[list[float]]:
    return [row[:n].tolist() for row, n in zip(matrix.detach(), lengths.tolist())]


def gradient_importance(model, batch, classes=None, reduction="grad_x_input") -> SaliencyMap:
    """Gradient of the class probability w.r.t. each token embedding.

    ``classes`` defaults to the model's own prediction per example.
    """
    if classes is None:
        with torch.no_grad():
            pred, _ = model(batch)
        classes = pred.logits.argmax(-1)
    elif isinstance(classes, int):
        classes = torch.full((len(batch),), classes, dtype=torch.long)
    classes = torch.as_tensor(classes, dtype=torch.long)
    n_classes = model.out.out_features
    if int(classes.min()) < 0 or int(classes.max()) >= n_classes:
        raise InvalidArgument("class index out of range")

    def fn(emb):
        pred, _ = model.forward_embedded(emb, batch.lengths, batch.mask)
        return pred.probs

    imp, _ = saliency_from_embeddings(fn, model.embed(batch.ids), batch.mask, classes, reduction)
    return SaliencyMap(_trim(imp, batch.lengths), classes.tolist(), reduction)


def attention_importance(model, batch) -> list[list[float]]:
    with torch.no_grad():
        _, att = model(batch)
    return _trim(att.weights, batch.lengths)


# --- reports ---------------------------------------------------------------


def build_reports(tokens, grads, attentions, predicted, labels=None) -> list[AttributionReport]:
    reports = []
    for i, (toks, g, a, c) in enumerate(zip(tokens, grads, attentions, predicted)):
        tau = None
        if len(g) >= 2:
            t = kendall_tau(a, g)
            tau = None if math.isnan(t) else t
        label = None if labels is None else int(labels[i])
        reports.append(AttributionReport(list(toks), list(g), list(a), tau, int(c), label))
    return reports


def summarize(reports, label_names=None) -> AgreementSummary:
    """Mean/median tau over scored examples; examples with an undefined tau
    (fewer than two tokens, or a constant ranking) are counted as skipped."""
    taus = [r.tau for r in reports if r.tau is not None]
    per_class: dict[str, dict] = {}
    for r in reports:
        if r.tau is None:
            continue
        name = str(label_names[r.predicted_class]) if label_names else str(r.predicted_class)
        per_class.setdefault(name, []).append(r.tau)
    per_class = {k: {"n": len(v), "mean_tau": sum(v) / len(v)} for k, v in sorted(per_class.items())}
    return AgreementSummary(
        n_examples=len(reports),
        n_scored=len(taus),
        skipped=len(reports) - len(taus),
        mean_tau=sum(taus) / len(taus) if taus else None,
        median_tau=statistics.median(taus) if taus else None,
        per_class=per_class,
    )


def agreement_report(model, batch, reduction="grad_x_input", label_names=None, chunk=256):
    """One report per example, scored against the predicted class."""
    model.eval()
    reports = []
    for start in range(0, len(batch), chunk):
        sub = batch.select(range(start, min(start + chunk, len(batch))))
        with torch.no_grad():
            pred, att = model(sub)
        predicted = pred.logits.argmax(-1)
        sal = gradient_importance(model, sub, predicted, reduction)
        tokens = sub.tokens or [[str(i) for i in row[:n].tolist()] for row, n in zip(sub.ids, sub.lengths)]
        reports += build_reports(
            tokens,
            sal.values,
            _trim(att.weights, sub.lengths),
            predicted.tolist(),
            None if sub.labels is None else sub.labels.tolist(),
        )
    return reports, summarize(reports, label_names)


# --- serialization ---------------------------------------------------------


def _dump(obj) -> str:
    """JSON with floats written at 17 significant digits; NaN becomes null."""
    if isinstance(obj, float):
        return "null" if not math.isfinite(obj) else format(obj, ".17g")
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_dump(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_dump(v) for v in obj) + "]"
    return json.dumps(obj, ensure_ascii=False)


def write_reports(path, reports) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(_dump(r.to_json()) + "\n")


def read_reports(path) -> list[AttributionReport]:
    with open(path, encoding="utf-8") as fh:
        return [AttributionReport.from_json(json.loads(line)) for line in fh if line.strip()]


# --- heatmaps --------------------------------------------------------------


def _shade(values, rgb_for):
    top = max(values) if values else 0.0
    out = []
    for v in values:
        x = v / top if top > 0 else 0.0
        out.append(rgb_for(min(max(x, 0.0), 1.0)))
    return out


def _red(x):
    c = round(255 * (1.0 - x))
    return f"rgb(255,{c},{c})"


def _blue(x):
    c = round(255 * (1.0 - x))
    return f"rgb({c},{c},255)"


def render_heatmap(report: AttributionReport, label_names=None) -> str:
    """HTML fragment: attention row (red) over gradient-importance row (blue).

    Background intensity is linear in the value divided by the row maximum.
    """
    def row(kind, values, colors):
        spans = "".join(
            f'<span class="tok" style="background-color:{c}" title="{v:.6g}">{html.escape(t)}</span> '
            for t, v, c in zip(report.tokens, values, colors)
        )
        return f'<div class="row {kind}"><span class="lbl">{kind}</span>{spans.rstrip()}</div>'

    pred = report.predicted_class
    pred_name = html.escape(str(label_names[pred])) if label_names else str(pred)
    tau = "n/a" if report.tau is None else f"{report.tau:.4f}"
    return (
        f'<div class="example"><div class="meta">pred={pred_name} tau={tau}</div>'
        + row("attention", report.attention, _shade(report.attention, _red))
        + row("gradient", report.grad_importance, _shade(report.grad_importance, _blue))
        + "</div>"
    )


_PAGE_CSS = (
    "body{font-family:sans-serif;margin:1em}"
    ".example{margin-bottom:1em;border-bottom:1px solid #ddd;padding-bottom:.5em}"
    ".meta{font-size:80%;color:#555}.row{line-height:1.8}"
    ".lbl{display:inline-block;width:6em;font-size:75%;color:#888}"
    ".tok{padding:1px 2px;border-radius:2px}"
)


def render_page(reports, title="attention heatmaps", label_names=None) -> str:
    body = "\n".join(render_heatmap(r, label_names) for r in reports)
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{html.escape(title)}</title><style>{_PAGE_CSS}</style></head>\n"
        f"<body>\n<h1>{html.escape(title)}</h1>\n{body}\n</body></html>\n"
    )
