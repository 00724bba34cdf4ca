"""DAG loss over deductive outputs: training regularizer and inference report.

DL(M) = mean over matrices of |ln(tr(exp(M * M)) / d)|, natural log.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .config import DagCoefficients
from .errors import DagOverflowError, InputError
from .kernel import expm_trace

TENSORS = ("A_LM", "A_P", "G_LM")
CSV_HEADER = ("model_id", "tensor", "lambda", "dl_value")
OVERFLOW = "overflow"
REPORT_METHOD = "single forward pass over prompt + greedy continuation; DL averaged over layers and heads"


def dag_loss(ms: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Mean DAG loss over a stack of (..., d, d) matrices.

    Returns ``(value, overflow)``; on overflow ``value`` is +inf.
    """
    if ms.dim() < 2 or ms.numel() == 0:
        raise InputError("dag_loss needs a non-empty collection of square matrices")
    d = ms.shape[-1]
    tr, over = expm_trace(ms * ms)
    if over.any():
        return torch.full((), math.inf, dtype=ms.dtype, device=ms.device), True
    return torch.log(tr / d).abs().mean(), False


def dag_regularizer(ded, coeffs: DagCoefficients) -> tuple[torch.Tensor, dict]:
    """lambda1 DL(A_LM) + lambda2 DL(A_P) + lambda3 DL(G_LM); off terms are skipped.

    Returns the differentiable total and a dict of the evaluated DL values
    (floats, inf on overflow). Overflow in an evaluated term raises.
    """
    total = None
    values = {}
    for name, lam, tensor in zip(TENSORS, coeffs.as_tuple(), (ded.a_lm, ded.a_p, ded.g_lm)):
        if lam is None:
            continue
        dl, over = dag_loss(tensor)
        values[name] = dl.item()
        if over:
            raise DagOverflowError(f"DAG loss of regularized tensor {name} overflowed")
        term = lam * dl
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros((), dtype=ded.a_lm.dtype, device=ded.a_lm.device)
    return total, values


def dag_values(ded) -> dict:
    """Detached DL per deductive tensor, ``math.inf`` where it overflowed."""
    out = {}
    with torch.no_grad():
        for name, tensor in zip(TENSORS, (ded.a_lm, ded.a_p, ded.g_lm)):
            dl, over = dag_loss(tensor)
            out[name] = math.inf if over else dl.item()
    return out


def format_value(v: Optional[float]) -> str:
    if v is None:
        return "NA"
    if math.isinf(v):
        return OVERFLOW
    if v == 0:
        return "0"
    return repr(float(v))


def _parse_value(s: str) -> Optional[float]:
    if s == "NA":
        return None
    if s == OVERFLOW:
        return math.inf
    return float(s)


@dataclass
class DagReport:
    model_id: str
    coefficients: DagCoefficients
    values: dict  # tensor name -> DL float (inf = overflow)
    method: str = REPORT_METHOD
    tokens: list = field(default_factory=list)

    @property
    def dlr(self) -> Optional[float]:
        """Weighted sum over A_P and G_LM terms that are regularized, as in the table column."""
        lams = dict(zip(TENSORS, self.coefficients.as_tuple()))
        terms = [lams[n] * self.values[n] for n in ("A_P", "G_LM") if lams[n] is not None]
        if not terms:
            return None
        return sum(terms)

    def rows(self) -> list[tuple]:
        lams = dict(zip(TENSORS, self.coefficients.as_tuple()))
        out = [(self.model_id, n, format_value(lams[n]), format_value(self.values[n])) for n in TENSORS]
        lam23 = [lams["A_P"], lams["G_LM"]]
        lam_txt = "NA" if all(x is None for x in lam23) else "+".join(format_value(x) for x in lam23)
        out.append((self.model_id, "DLR", lam_txt, format_value(self.dlr)))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(self.rows())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "DagReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise InputError(f"DAG report CSV must start with header {','.join(CSV_HEADER)}")
        by_name = {r[1]: r for r in rows[1:]}
        missing = [n for n in TENSORS if n not in by_name]
        if missing:
            raise InputError(f"DAG report missing rows for {missing}")
        model_id = by_name["A_LM"][0]
        lams = [_parse_value(by_name[n][2]) for n in TENSORS]
        values = {n: _parse_value(by_name[n][3]) for n in TENSORS}
        return cls(model_id, DagCoefficients(*lams), values)

    def table_row(self) -> str:
        """One line laid out like the inference DAG-loss table."""
        cells = [self.model_id]
        cells += [format_value(x) for x in self.coefficients.as_tuple()]
        cells += [format_value(self.values[n]) for n in TENSORS]
        cells.append(format_value(self.dlr))
        return " | ".join(cells)


def dag_inference_report(
    model,
    prompt: Sequence[int],
    n_gen: int = 50,
    coefficients: Optional[DagCoefficients] = None,
    model_id: str = "pldr-llm",
) -> DagReport:
    """Greedy-decode ``n_gen`` tokens, then evaluate DL on one pass over the full sequence."""
    from .generation import generate

    if len(prompt) == 0:
        raise InputError("prompt must not be empty")
    tokens = generate(model, list(prompt), n_gen, strategy="greedy", stop_id=None)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            res = model(torch.tensor([tokens]))
    finally:
        model.train(was_training)
    values = dag_values(res.deductive)
    return DagReport(model_id, coefficients or DagCoefficients(), values, tokens=tokens)
