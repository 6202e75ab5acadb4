"""Caption metrics and the external generator / embedder adapters.

Tokenization (version ``TOKENIZER_VERSION``): lowercase, split punctuation
into separate tokens, split on whitespace.

``meteor_like`` is a METEOR-style approximation: exact then Porter-stem
unigram matching, the recall-weighted harmonic mean and the cubic
fragmentation penalty. There is no synonym stage, so values are not
comparable to the reference METEOR implementation.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
import subprocess
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np
from nltk.stem import PorterStemmer

from .errors import CapabilityError, DimensionError, FormatError, ParameterError
from .types import EmbeddingBatch

TOKENIZER_VERSION = "lower-punct-ws/1"
METEOR_VARIANT = "meteor-like/exact+stem/no-synonyms"
BLEU_SMOOTHING_EPS = 0.1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_stemmer = PorterStemmer()


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _tokens(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


class CaptionSource(str, enum.Enum):
    LATENT_CAPTION = "L2Cap"
    LAT2REC_CAPTION = "I2Cap"


@dataclass(frozen=True)
class CaptionPair:
    """A candidate caption with its references.

    References must be non-empty. An empty candidate is accepted and scored
    as degenerate (all text metrics 0), so a failed generation does not
    abort a whole evaluation.
    """

    candidate: tuple
    references: tuple
    source: CaptionSource = CaptionSource.LATENT_CAPTION
    item_id: str = ""
    image_row: Optional[int] = None

    def __post_init__(self):
        cand = tuple(_tokens(self.candidate))
        refs = tuple(tuple(_tokens(r)) for r in ([self.references] if isinstance(self.references, str) else self.references))
        if not refs or any(len(r) == 0 for r in refs):
            raise ParameterError(f"item {self.item_id!r}: every caption pair needs at least one non-empty reference")
        object.__setattr__(self, "candidate", cand)
        object.__setattr__(self, "references", refs)
        object.__setattr__(self, "source", CaptionSource(self.source))

    @property
    def degenerate(self) -> bool:
        return len(self.candidate) == 0


# -- BLEU ----------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuResult:
    score: float
    precisions: tuple
    brevity_penalty: float
    degenerate: bool = False


def bleu_detail(candidate, references, n: int = 4) -> BleuResult:
    if not 1 <= n <= 4:
        raise ParameterError(f"BLEU order must be in 1..4, got {n}")
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in ([references] if isinstance(references, str) else references)]
    if not refs:
        raise ParameterError("BLEU needs at least one reference")
    if not cand:
        return BleuResult(0.0, (0.0,) * n, 0.0, degenerate=True)
    c = len(cand)
    smooth = c < n
    precisions = []
    # orders longer than a short candidate have no n-grams at all; they drop out
    orders = min(n, c) if smooth else n
    for m in range(1, orders + 1):
        counts = _ngrams(cand, m)
        max_ref: Counter = Counter()
        for r in refs:
            for g, k in _ngrams(r, m).items():
                max_ref[g] = max(max_ref[g], k)
        matched = sum(min(k, max_ref[g]) for g, k in counts.items())
        total = max(c - m + 1, 0)
        if matched == 0 and smooth and m > 1:
            precisions.append(BLEU_SMOOTHING_EPS / total)
        else:
            precisions.append(matched / total if total else 0.0)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    if min(precisions) == 0.0:
        return BleuResult(0.0, tuple(precisions), bp)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / len(precisions))
    return BleuResult(min(score, 1.0), tuple(precisions), bp)


def bleu(candidate, references, n: int = 4) -> float:
    """Sentence BLEU with uniform weights up to order ``n``.

    Candidates shorter than ``n`` are smoothed: zero higher-order precisions
    become ``0.1 / count`` and orders beyond the candidate length are left
    out of the geometric mean. A zero unigram precision still scores 0.
    """
    return bleu_detail(candidate, references, n).score


# -- METEOR-style ---------------------------------------------------------------


def _align(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    used = [False] * len(ref)
    pairs: dict[int, int] = {}
    stems_c = [_stemmer.stem(w) for w in cand]
    stems_r = [_stemmer.stem(w) for w in ref]
    for keys_c, keys_r in ((cand, ref), (stems_c, stems_r)):
        prev = -2
        for i, w in enumerate(keys_c):
            if i in pairs:
                prev = pairs[i]
                continue
            free = [j for j, v in enumerate(keys_r) if not used[j] and v == w]
            if not free:
                continue
            # continuing the previous match keeps chunks long
            j = prev + 1 if prev + 1 in free else free[0]
            used[j] = True
            pairs[i] = j
            prev = j
    return sorted(pairs.items())


def _meteor_single(cand: Sequence[str], ref: Sequence[str]) -> float:
    alignment = _align(cand, ref)
    m = len(alignment)
    if m == 0:
        return 0.0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(alignment, alignment[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    p = m / len(cand)
    r = m / len(ref)
    fmean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1.0 - penalty)


def meteor_like(candidate, references) -> float:
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in ([references] if isinstance(references, str) else references)]
    if not cand or not refs:
        return 0.0
    return max(_meteor_single(cand, r) for r in refs if r)


# -- embedding adapters ---------------------------------------------------------


class TextEmbedder(Protocol):
    name: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingEmbedder:
    """Deterministic stub: L2-normalised hashed bag of tokens."""

    def __init__(self, dim: int = 256, name: str = "hashing-stub"):
        self.dim = dim
        self.name = name

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for row, text in enumerate(texts):
            for tok in tokenize(text):
                h = hashlib.sha256(tok.encode()).digest()
                out[row, int.from_bytes(h[:4], "little") % self.dim] += 1.0 if h[4] & 1 else -1.0
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return out / np.where(norms > 0, norms, 1.0)


class SentenceTransformerEmbedder:
    """Adapter over a sentence-transformers model; loading failures become CapabilityError."""

    def __init__(self, model_name: str):
        self.name = model_name
        try:
            from sentence_transformers import SentenceTransformer

            self._model = SentenceTransformer(model_name)
        except Exception as exc:  # noqa: BLE001 - any load failure means the metric is unavailable
            raise CapabilityError(f"sentence embedder '{model_name}' unavailable: {exc}") from exc

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.asarray(self._model.encode(list(texts)), dtype=np.float64)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"embedding dimensions differ: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def embedding_similarity(candidate_text: str, reference_object, embedder: Optional[TextEmbedder]) -> float:
    """Cosine similarity of the candidate's embedding with a reference.

    ``reference_object`` is either a reference caption (embedded with the same
    adapter) or a precomputed vector in the adapter's space, such as a
    ground-truth image embedding.
    """
    if embedder is None:
        raise CapabilityError("no embedding adapter configured")
    if isinstance(reference_object, str):
        vecs = embedder.embed([candidate_text, reference_object])
        return _cosine(vecs[0], vecs[1])
    return _cosine(embedder.embed([candidate_text])[0], reference_object)


# -- scoring --------------------------------------------------------------------


@dataclass(frozen=True)
class CaptionScore:
    bleu1: float
    bleu4: float
    meteor_like: float
    sentence_sim: Optional[float] = None
    clip_image_sim: Optional[float] = None
    degenerate: bool = False

    def available(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "degenerate" and v is not None}


METRICS = ("bleu1", "bleu4", "meteor_like", "sentence_sim", "clip_image_sim")


def score_pair(
    pair: CaptionPair,
    sentence_embedder: Optional[TextEmbedder] = None,
    image_embedder: Optional[TextEmbedder] = None,
    image_embeddings: Optional[np.ndarray] = None,
) -> CaptionScore:
    cand_text = " ".join(pair.candidate)
    sentence = None
    if sentence_embedder is not None and not pair.degenerate:
        sentence = max(embedding_similarity(cand_text, " ".join(r), sentence_embedder) for r in pair.references)
    clip = None
    if image_embedder is not None and image_embeddings is not None and pair.image_row is not None and not pair.degenerate:
        clip = embedding_similarity(cand_text, image_embeddings[pair.image_row], image_embedder)
    return CaptionScore(
        bleu(pair.candidate, pair.references, 1),
        bleu(pair.candidate, pair.references, 4),
        meteor_like(pair.candidate, pair.references),
        sentence,
        clip,
        pair.degenerate,
    )


def evaluate_captions(
    pairs: Sequence[CaptionPair],
    sentence_embedder: Optional[TextEmbedder] = None,
    image_embedder: Optional[TextEmbedder] = None,
    image_embeddings: Optional[np.ndarray] = None,
) -> dict:
    """Per-item scores and per-source means.

    A metric whose adapter is missing is listed under ``unavailable`` and has
    no numeric value anywhere in the report.
    """
    scores = [score_pair(p, sentence_embedder, image_embedder, image_embeddings) for p in pairs]
    unavailable = []
    if sentence_embedder is None:
        unavailable.append("sentence_sim")
    if image_embedder is None or image_embeddings is None:
        unavailable.append("clip_image_sim")
    items = []
    for p, s in zip(pairs, scores):
        rec = {"item_id": p.item_id, "source": p.source.value, "degenerate": s.degenerate}
        rec.update({k: v for k, v in s.available().items() if k not in unavailable})
        items.append(rec)
    summary = {}
    for source in CaptionSource:
        group = [s for p, s in zip(pairs, scores) if p.source is source]
        if not group:
            continue
        entry = {"n_items": len(group), "n_degenerate": sum(s.degenerate for s in group)}
        for metric in METRICS:
            if metric in unavailable:
                continue
            vals = [getattr(s, metric) for s in group if getattr(s, metric) is not None]
            if vals:
                entry[metric] = float(np.mean(vals))
        summary[source.value] = entry
    return {
        "tokenizer": TOKENIZER_VERSION,
        "meteor_variant": METEOR_VARIANT,
        "unavailable": unavailable,
        "summary": summary,
        "items": items,
    }


# -- caption files -----------------------------------------------------------------

CAPTION_FIELDS = {"item_id", "source", "candidate", "references", "image_row"}


def read_caption_file(path) -> list[CaptionPair]:
    """JSON-lines, one record per item: item_id, source, candidate, references[, image_row]."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
        unknown = set(rec) - CAPTION_FIELDS
        missing = {"item_id", "source", "candidate", "references"} - set(rec)
        if unknown or missing:
            raise FormatError(f"{path}:{lineno}: unknown keys {sorted(unknown)}, missing keys {sorted(missing)}")
        pairs.append(CaptionPair(rec["candidate"], rec["references"], rec["source"], str(rec["item_id"]), rec.get("image_row")))
    return pairs


def write_caption_file(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


# -- generator adapters ---------------------------------------------------------


def embedding_checksum(vector) -> str:
    return hashlib.sha256(np.ascontiguousarray(vector, dtype="<f4").tobytes()).hexdigest()


@dataclass(frozen=True)
class GenerationRequest:
    item_id: str
    prompt: str
    embedding: tuple
    embedding_sha256: str
    embedding_ref: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["embedding"] = list(self.embedding)
        return d


@dataclass(frozen=True)
class GenerationResult:
    item_id: str
    text: Optional[str]
    error: Optional[str] = None

    @property
    def tokens(self) -> Optional[list[str]]:
        return None if self.text is None else tokenize(self.text)


class CaptionGenerator(Protocol):
    def generate(self, request: GenerationRequest) -> str: ...


class EchoGenerator:
    def __init__(self, text: str):
        self.text = text

    def generate(self, request: GenerationRequest) -> str:
        return self.text


class ChecksumGenerator:
    """Stub whose caption is a function of the embedding bytes."""

    def generate(self, request: GenerationRequest) -> str:
        return f"caption {request.embedding_sha256[:12]}"


class CommandGenerator:
    """Runs an external command per item: request JSON on stdin, caption text on stdout."""

    def __init__(self, argv: Sequence[str], timeout: float = 60.0):
        self.argv = list(argv)
        self.timeout = timeout

    def generate(self, request: GenerationRequest) -> str:
        proc = subprocess.run(
            self.argv,
            input=json.dumps(request.to_json()),
            capture_output=True,
            text=True,
            timeout=self.timeout,
            check=False,
        )
        if proc.returncode != 0:
            raise RuntimeError(f"generator exited {proc.returncode}: {proc.stderr.strip()[:500]}")
        return proc.stdout.strip()


def generate_captions(
    eeg_embeddings: EmbeddingBatch,
    generator: CaptionGenerator,
    prompt: str,
    transcript_path=None,
    item_ids: Optional[Sequence[str]] = None,
    max_in_flight: int = 4,
    timeout: Optional[float] = None,
    embedding_ref: Optional[Callable[[int], dict]] = None,
) -> list[GenerationResult]:
    """One generator call per embedding row, results in input order.

    Failures and timeouts become per-item error records; the batch carries
    on. Every request/response pair is appended verbatim to the transcript.
    """
    if not prompt or not prompt.strip():
        raise ParameterError("prompt must be non-empty")
    ids = [str(i) for i in (item_ids if item_ids is not None else range(eeg_embeddings.size))]
    if len(ids) != eeg_embeddings.size:
        raise DimensionError(f"{len(ids)} item ids for {eeg_embeddings.size} embeddings")
    requests = []
    for row, item in enumerate(ids):
        vec = np.asarray(eeg_embeddings.vectors[row], dtype=np.float32)
        requests.append(GenerationRequest(
            item,
            prompt,
            tuple(float(x) for x in vec),
            embedding_checksum(vec),
            embedding_ref(row) if embedding_ref else {"row": row},
        ))

    lock = threading.Lock()
    log = open(transcript_path, "a", encoding="utf-8") if transcript_path else None

    def record(req: GenerationRequest, res: GenerationResult) -> None:
        if log is None:
            return
        line = json.dumps({"item_id": req.item_id, "request": req.to_json(), "response": res.text, "error": res.error}, ensure_ascii=False)
        with lock:
            log.write(line + "\n")
            log.flush()

    results: list[GenerationResult] = []
    try:
        with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
            futures = [pool.submit(generator.generate, r) for r in requests]
            for req, fut in zip(requests, futures):
                try:
                    res = GenerationResult(req.item_id, str(fut.result(timeout=timeout)))
                except FutureTimeout:
                    res = GenerationResult(req.item_id, None, f"timeout after {timeout}s")
                except Exception as exc:  # noqa: BLE001 - recorded per item
                    res = GenerationResult(req.item_id, None, f"{type(exc).__name__}: {exc}")
                record(req, res)
                results.append(res)
    finally:
        if log is not None:
            log.close()
    return results
