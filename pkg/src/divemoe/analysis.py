"""Routing statistics, token-level expert attribution, and PPL comparison tables.

Everything here is read-only over models: it runs forward passes, counts
routing decisions, and formats the results as CSV-friendly grids.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .affinity import worker_threads
from .corpus import tokenize
from .errors import DimensionError, FormatError, ParameterError
from .model import eval_perplexity


# -- routing distribution ----------------------------------------------------------


@dataclass
class RoutingStats:
    """Per eval set: how often each expert was selected.

    counts[name] is an int64 [n_layers, n_experts] grid of raw selection
    events; ratios[name] sums counts over layers and divides by the total
    number of activation slots (tokens * layers * k), so with top-k routing
    every selected expert contributes one slot.
    """

    set_names: tuple
    n_layers: int
    n_experts: int
    top_k: int
    tokens: dict
    counts: dict = field(repr=False)
    ratios: dict = field(repr=False)

    def __post_init__(self):
        for name in self.set_names:
            c = self.counts[name]
            if c.shape != (self.n_layers, self.n_experts):
                raise DimensionError("counts grid for %r has shape %s" % (name, c.shape))
            if c.min() < 0:
                raise ParameterError("negative routing count for %r" % name)
            slots = self.tokens[name] * self.n_layers * self.top_k
            if int(c.sum()) != slots:
                raise ParameterError(
                    "counts for %r sum to %d, expected %d slots" % (name, int(c.sum()), slots)
                )
            if abs(float(self.ratios[name].sum()) - 1.0) > 1e-6:
                raise ParameterError("ratios for %r do not sum to 1" % name)

    def heatmap_data(self):
        values = np.stack([self.ratios[name] for name in self.set_names])
        cols = tuple("expert%d" % e for e in range(self.n_experts))
        return self.set_names, cols, values


def _count_one_set(moe, name, stream, k, seq_len, chunk_rows):
    arr = tokenize(stream)
    n_windows = len(arr) // seq_len
    if n_windows == 0:
        raise ParameterError(
            "eval set %r is shorter than one window of %d bytes" % (name, seq_len)
        )
    windows = arr[: n_windows * seq_len].reshape(n_windows, seq_len)
    counts = np.zeros((moe.config.n_layers, moe.n_experts), dtype=np.int64)
    for lo in range(0, n_windows, chunk_rows):
        sel = moe.selections(windows[lo : lo + chunk_rows], k)
        for li, chosen in enumerate(sel):
            counts[li] += np.bincount(chosen.reshape(-1), minlength=moe.n_experts)
    return counts, n_windows * seq_len


def routing_distribution(moe, eval_sets: dict, k=None, seq_len=64, chunk_rows=32) -> RoutingStats:
    """Count every (token, layer) routing event per eval set.

    eval_sets maps a set name to a byte stream; each stream is cut into
    non-overlapping seq_len windows (remainder dropped) and every window
    position routes at every layer.
    """
    if not eval_sets:
        raise ParameterError("need at least one eval set")
    for name, stream in eval_sets.items():
        if not stream:
            raise ParameterError("eval set %r is empty" % name)
    if k is None:
        k = moe.default_mode[1]
    names = tuple(eval_sets)
    with ThreadPoolExecutor(max_workers=worker_threads(len(names))) as pool:
        futs = {
            name: pool.submit(_count_one_set, moe, name, eval_sets[name], k, seq_len, chunk_rows)
            for name in names
        }
        results = {name: fut.result() for name, fut in futs.items()}
    counts = {name: results[name][0] for name in names}
    tokens = {name: results[name][1] for name in names}
    slots = {name: tokens[name] * moe.config.n_layers * k for name in names}
    ratios = {name: counts[name].sum(axis=0) / float(slots[name]) for name in names}
    return RoutingStats(
        set_names=names,
        n_layers=moe.config.n_layers,
        n_experts=moe.n_experts,
        top_k=k,
        tokens=tokens,
        counts=counts,
        ratios=ratios,
    )


# -- token attribution -------------------------------------------------------------


@dataclass(frozen=True)
class TokenAttribution:
    """One token's majority expert across layers (ties go to the lower id)."""

    position: int
    token: int
    expert: int
    layer_votes: tuple

    def __post_init__(self):
        if not 0 <= self.expert < len(self.layer_votes):
            raise ParameterError("expert id %d outside vote table" % self.expert)
        if self.layer_votes[self.expert] != max(self.layer_votes):
            raise ParameterError("chosen expert does not hold the vote maximum")


def token_attribution(moe, text, window=None, chunk_rows=32):
    """Per-token expert attribution: mode over layers of the top-1 choice.

    text may be str or bytes; it is processed in non-overlapping windows
    (default: the model's max sequence length) including any short tail.
    Row batching never affects the result.
    """
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if not data:
        raise ParameterError("text is empty")
    arr = tokenize(data)
    if window is None:
        window = moe.config.max_seq_len
    if window < 1:
        raise ParameterError("window must be >= 1")

    def vote(ids):
        # ids [rows, seq] -> per-position layer votes [rows*seq, n_experts]
        v = np.zeros((ids.size, moe.n_experts), dtype=np.int64)
        for lo in range(0, ids.shape[0], chunk_rows):
            chunk = ids[lo : lo + chunk_rows]
            base = lo * ids.shape[1]
            for chosen in moe.selections(chunk, 1):
                flat = chosen.reshape(-1)
                v[base + np.arange(len(flat)), flat] += 1
        return v

    n_full = len(arr) // window
    votes = [vote(arr[: n_full * window].reshape(n_full, window))] if n_full else []
    tail = arr[n_full * window :]
    if tail.size:
        votes.append(vote(tail.reshape(1, -1)))
    votes = np.concatenate(votes, axis=0)
    out = []
    for i in range(len(arr)):
        out.append(
            TokenAttribution(
                position=i,
                token=int(arr[i]),
                expert=int(np.argmax(votes[i])),
                layer_votes=tuple(int(v) for v in votes[i]),
            )
        )
    return out


# -- heatmap CSV -------------------------------------------------------------------


def _as_heatmap(data):
    if hasattr(data, "heatmap_data"):
        return data.heatmap_data()
    rows, cols, values = data
    return tuple(rows), tuple(cols), np.asarray(values, dtype=np.float64)


def emit_heatmap_csv(data, path):
    """Write labelled grid data as `row,col,value` rows, 9 significant digits."""
    rows, cols, values = _as_heatmap(data)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (len(rows), len(cols)):
        raise DimensionError(
            "value grid %s does not match %d rows x %d cols" % (values.shape, len(rows), len(cols))
        )
    for label in list(rows) + list(cols):
        if "," in str(label):
            raise FormatError("heatmap label %r contains a comma" % label)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("row,col,value\n")
        for i, r in enumerate(rows):
            for j, c in enumerate(cols):
                fh.write("%s,%s,%.9g\n" % (r, c, values[i, j]))


def read_heatmap_csv(path):
    """Inverse of emit_heatmap_csv: (row_labels, col_labels, float64 grid)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "row,col,value":
            raise FormatError("unexpected heatmap header %r" % header)
        rows, cols, cells = [], [], {}
        for line in fh:
            line = line.strip()
            if not line:
                continue
            r, c, v = line.split(",")
            if r not in rows:
                rows.append(r)
            if c not in cols:
                cols.append(c)
            cells[(r, c)] = float(v)
    values = np.zeros((len(rows), len(cols)), dtype=np.float64)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            if (r, c) not in cells:
                raise FormatError("heatmap is missing cell (%s, %s)" % (r, c))
            values[i, j] = cells[(r, c)]
    return tuple(rows), tuple(cols), values


# -- comparison report -------------------------------------------------------------


def ffn_annotation(model) -> str:
    """FFN-size label: '100%' for a full dense FFN, else 'P% × n' with n experts."""
    full = model.config.d_ff
    if hasattr(model, "n_experts"):
        width = model.expert_width()
        return "%g%% × %d" % (100.0 * width / full, model.n_experts)
    width = model.ffn_width(0)
    if width == full:
        return "100%"
    return "%g%% × 1" % (100.0 * width / full)


@dataclass
class CompareReport:
    model_names: tuple
    ffn_sizes: tuple
    set_names: tuple
    ppl: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.ppl.shape != (len(self.model_names), len(self.set_names)):
            raise DimensionError("ppl grid shape %s" % (self.ppl.shape,))

    def heatmap_data(self):
        return self.model_names, self.set_names, self.ppl

    def lookup(self, model_name, set_name) -> float:
        i = self.model_names.index(model_name)
        j = self.set_names.index(set_name)
        return float(self.ppl[i, j])


def compare_report(models, eval_sets: dict, seq_len=64) -> CompareReport:
    """Perplexity grid over (model, eval set) with FFN-size annotations.

    models is an ordered mapping or list of (name, model) pairs; each model
    is evaluated under its own default routing mode.
    """
    pairs = list(models.items()) if isinstance(models, dict) else list(models)
    if not pairs:
        raise ParameterError("need at least one model")
    if not eval_sets:
        raise ParameterError("need at least one eval set")
    names = tuple(n for n, _ in pairs)
    sets = tuple(eval_sets)

    def cell(i, j):
        model = pairs[i][1]
        try:
            return eval_perplexity(model, eval_sets[sets[j]], seq_len).perplexity
        except Exception as e:
            raise type(e)("eval of %r on %r: %s" % (names[i], sets[j], e)) from e

    grid = np.zeros((len(pairs), len(sets)), dtype=np.float64)
    jobs = [(i, j) for i in range(len(pairs)) for j in range(len(sets))]
    with ThreadPoolExecutor(max_workers=worker_threads(len(jobs))) as pool:
        futs = {pool.submit(cell, i, j): (i, j) for i, j in jobs}
        for fut, (i, j) in futs.items():
            grid[i, j] = fut.result()
    return CompareReport(
        model_names=names,
        ffn_sizes=tuple(ffn_annotation(m) for _, m in pairs),
        set_names=sets,
        ppl=grid,
    )


def export_compare_csv(report: CompareReport, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("model,ffn_size,eval_set,ppl\n")
        for i, name in enumerate(report.model_names):
            for j, sname in enumerate(report.set_names):
                fh.write(
                    "%s,%s,%s,%.9g\n" % (name, report.ffn_sizes[i], sname, report.ppl[i, j])
                )


def format_compare_table(report: CompareReport) -> str:
    """Plain-text table: one row per model, one PPL column per eval set."""
    headers = ["model", "ffn_size"] + list(report.set_names)
    body = []
    for i, name in enumerate(report.model_names):
        body.append(
            [name, report.ffn_sizes[i]] + ["%.4f" % v for v in report.ppl[i]]
        )
    widths = [max(len(r[c]) for r in [headers] + body) for c in range(len(headers))]
    lines = []
    for row in [headers] + body:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def export_attribution_csv(attributions, path):
    """Token case-study rows: position, byte, printable char, chosen expert, votes."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("position,token,char,expert,layer_votes\n")
        for a in attributions:
            ch = chr(a.token) if 32 <= a.token < 127 else "."
            if ch in (",", '"'):
                ch = "."
            votes = "|".join(str(v) for v in a.layer_votes)
            fh.write("%d,%d,%s,%d,%s\n" % (a.position, a.token, ch, a.expert, votes))
