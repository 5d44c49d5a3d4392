"""Synthetic scene-question tasks that need different depths of the vision hierarchy.

Every image is a grid of patches, each with a shape, a texture and a colour id.

* detail: "which texture at patch (r, c)?" -- needs per-patch information.
* semantic: "which scene class?" -- the scene class is the dominant shape
  plus whether high or low colour ids dominate, a function of the patch
  multiset only.
* compositional: answer is (texture at (r, c) + scene class) mod #scenes.

Every image has the same texture count profile (e.g. 6/4/3/3 patches on
a 4x4 grid) with the counts dealt to texture ids at random, and every
attribute column is shuffled independently, so the arrangement is
exchangeable. Features that are symmetric in the patches therefore know
the texture histogram but nothing about which patch holds which texture:
the best guess for the queried patch is the majority texture, right with
probability max(profile) / N. The skew is what lets a learner bootstrap:
attending to all patches at once already beats chance, and sharpening
that attention onto the queried patch then pays off smoothly.

Query patches are drawn uniformly and the answer id is ``seed % n_answers``
(the texture-id assignment is conditioned on it), so any window of
consecutive seeds whose length is a multiple of the class count is exactly
uniform without changing the distribution of images.
"""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigError

TASK_KINDS = ("detail", "semantic", "compositional")


@dataclass(frozen=True)
class TaskSpec:
    grid: tuple[int, int] = (4, 4)
    num_shapes: int = 4
    num_textures: int = 4
    num_colors: int = 4
    texture_skew: int = 2  # patches moved onto the majority texture; 0 = balanced

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def texture_counts(self) -> tuple[int, ...]:
        """Texture count profile of every image, e.g. (6, 4, 3, 3) on a 4x4 grid.

        Which texture id receives which count is shuffled per image.
        """
        n, t = self.num_patches, self.num_textures
        counts = [n // t + (i < n % t) for i in range(t)]
        counts[0] += self.texture_skew
        for i in range(self.texture_skew):
            counts[t - 1 - i % (t - 1)] -= 1
        return tuple(counts)

    @property
    def num_scenes(self) -> int:
        return 2 * self.num_shapes

    def num_answers(self, kind: str) -> int:
        if kind == "detail":
            return self.num_textures
        if kind in ("semantic", "compositional"):
            return self.num_scenes
        raise ConfigError(f"unknown task kind {kind!r}")

    def validate(self) -> None:
        n = self.num_patches
        if self.num_textures < 2:
            raise ConfigError("need at least two textures")
        if self.texture_skew < 0 or min(self.texture_counts) < 1:
            raise ConfigError(f"texture_skew {self.texture_skew} leaves a texture with no patches")
        if self.num_textures > self.num_scenes:
            raise ConfigError("compositional answers need num_textures <= num_scenes")
        if self.num_colors < 2 or self.num_colors % 2:
            raise ConfigError("num_colors must be even (low/high halves)")
        if n < 8 or self.num_shapes < 2:
            raise ConfigError("grid too small for a dominant shape")


@dataclass(frozen=True)
class Vocab:
    """Fixed token layout: specials, task markers, row/col markers, answer blocks."""

    size: int = 64
    spec: TaskSpec = TaskSpec()

    PAD = 0
    BOS = 1

    @property
    def task_base(self) -> int:
        return 2

    @property
    def row_base(self) -> int:
        return self.task_base + len(TASK_KINDS)

    @property
    def col_base(self) -> int:
        return self.row_base + self.spec.grid[0]

    def answer_base(self, kind: str) -> int:
        base = self.col_base + self.spec.grid[1]
        for k in TASK_KINDS:
            if k == kind:
                return base
            base += self.spec.num_answers(k)
        raise ConfigError(f"unknown task kind {kind!r}")

    @property
    def required(self) -> int:
        last = TASK_KINDS[-1]
        return self.answer_base(last) + self.spec.num_answers(last)

    def answer_tokens(self, kind: str) -> range:
        base = self.answer_base(kind)
        return range(base, base + self.spec.num_answers(kind))

    def task_token(self, kind: str) -> int:
        return self.task_base + TASK_KINDS.index(kind)

    def validate(self) -> None:
        self.spec.validate()
        if self.size < self.required:
            raise ConfigError(f"vocab of {self.size} tokens cannot encode the tasks (needs {self.required})")


@dataclass(frozen=True)
class SyntheticImage:
    patch_grid: tuple[int, int]
    patches: np.ndarray  # (N, 3) int: shape, texture, colour
    global_label: int

    def texture_at(self, row: int, col: int) -> int:
        return int(self.patches[row * self.patch_grid[1] + col, 1])


@dataclass(frozen=True)
class QuerySample:
    seed: int
    image: SyntheticImage
    question_tokens: tuple[int, ...]
    answer_tokens: tuple[int, ...]
    task_kind: str
    answer_mask: tuple[bool, ...]  # over question positions; marks where the answer is predicted
    query: tuple[int, int]


def scene_label(patches: np.ndarray, spec: TaskSpec) -> int:
    shape_counts = np.bincount(patches[:, 0], minlength=spec.num_shapes)
    dominant = int(np.argmax(shape_counts))
    high = int((patches[:, 2] >= spec.num_colors // 2).sum())
    group = int(2 * high > len(patches))
    return dominant + spec.num_shapes * group


def _make_image(
    rng: np.random.Generator, label: int, spec: TaskSpec, query: tuple[int, int] | None = None
) -> SyntheticImage:
    """Random image of scene ``label``; ``query=(pos, t)`` pins texture id ``t`` at patch ``pos``."""
    n = spec.num_patches
    dominant, group = label % spec.num_shapes, label // spec.num_shapes
    lo = min(n // spec.num_shapes + 2, n // 2)
    k = int(rng.integers(lo, n // 2 + 1))
    others = [s for s in range(spec.num_shapes) if s != dominant]
    while True:
        rest = rng.choice(others, size=n - k)
        if np.bincount(rest, minlength=spec.num_shapes).max() < k:
            break
    shapes = rng.permutation(np.concatenate([np.full(k, dominant), rest]))

    half = spec.num_colors // 2
    m_lo, m_hi = 3, n // 2 - 2
    m = int(rng.integers(m_lo, m_hi + 1))
    n_high = n - m if group else m
    colors = np.concatenate(
        [rng.integers(half, spec.num_colors, size=n_high), rng.integers(0, half, size=n - n_high)]
    )
    colors = rng.permutation(colors)

    ranks = rng.permutation(np.repeat(np.arange(spec.num_textures), spec.texture_counts))
    ids = rng.permutation(spec.num_textures)  # which texture id gets the i-th count
    if query is not None:
        # swapping keeps ids a uniform bijection among those with ids[rank] == t
        pos, t = query
        q, j = ranks[pos], int(np.flatnonzero(ids == t)[0])
        ids[[q, j]] = ids[[j, q]]
    textures = ids[ranks]
    patches = np.stack([shapes, textures, colors], axis=1).astype(np.int64)
    assert scene_label(patches, spec) == label
    return SyntheticImage(spec.grid, patches, label)


def generate_sample(seed: int, task_kind: str, vocab: Vocab | None = None) -> QuerySample:
    vocab = vocab or Vocab()
    vocab.validate()
    spec = vocab.spec
    if task_kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {task_kind!r}")
    rng = np.random.default_rng([seed, TASK_KINDS.index(task_kind)])
    n_scenes, n_tex = spec.num_scenes, spec.num_textures
    pos = int(rng.integers(spec.num_patches))
    if task_kind == "detail":
        answer = seed % n_tex
        image = _make_image(rng, int(rng.integers(n_scenes)), spec, (pos, answer))
    elif task_kind == "semantic":
        answer = seed % n_scenes
        image = _make_image(rng, answer, spec)
    else:
        answer = seed % n_scenes
        t = int(rng.integers(n_tex))
        image = _make_image(rng, (answer - t) % n_scenes, spec, (pos, t))
    r, c = divmod(pos, spec.grid[1])
    question = (vocab.BOS, vocab.task_token(task_kind), vocab.row_base + r, vocab.col_base + c)
    return QuerySample(
        seed=seed,
        image=image,
        question_tokens=question,
        answer_tokens=(vocab.answer_base(task_kind) + answer,),
        task_kind=task_kind,
        answer_mask=(False,) * (len(question) - 1) + (True,),
        query=(r, c),
    )


def answer_oracle(sample: QuerySample, spec: TaskSpec) -> int:
    """Recompute the answer index from the image alone (lookup / recount)."""
    r, c = sample.query
    texture = sample.image.texture_at(r, c)
    scene = scene_label(sample.image.patches, spec)
    if sample.task_kind == "detail":
        return texture
    if sample.task_kind == "semantic":
        return scene
    return (texture + scene) % spec.num_scenes


def theoretical_floor(task_kind: str, encoder, spec: TaskSpec | None = None) -> float:
    """Best accuracy achievable from post-bottleneck features alone.

    Without a bottleneck nothing is hidden and the bound is 1.0; the scene
    class survives the bottleneck, so semantic is 1.0 either way. Past the
    bottleneck only the patch multiset is known, so the queried texture is
    ``t`` with probability ``count_t / N``. Compositional answers are a
    bijection of the texture once the scene is known, giving the same bound.
    """
    spec = spec or TaskSpec(
        grid=tuple(encoder.patch_grid),
        num_textures=encoder.texture_embed.num_embeddings,
        num_shapes=encoder.shape_embed.num_embeddings,
        num_colors=encoder.color_embed.num_embeddings,
    )
    if task_kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {task_kind!r}")
    if getattr(encoder, "detail_bottleneck_layer", None) is None or task_kind == "semantic":
        return 1.0
    # enumerate (scene, texture) pairs and keep the likeliest answer per scene
    probs = [c / spec.num_patches for c in spec.texture_counts]
    n_scenes = spec.num_scenes
    total = 0.0
    for scene in range(n_scenes):
        by_answer = Counter()
        for t, p in enumerate(probs):
            answer = t if task_kind == "detail" else (t + scene) % n_scenes
            by_answer[answer] += p
        total += max(by_answer.values())
    return total / n_scenes


@dataclass
class Batch:
    patches: Tensor  # (B, N, 3) long
    text: Tensor  # (B, N_t) long
    targets: Tensor  # (B, N_t) long
    answer_mask: Tensor  # (B, N_t) bool
    answers: Tensor  # (B,) answer token ids
    kinds: list[str]

    def __len__(self) -> int:
        return self.text.shape[0]


def collate(samples: Sequence[QuerySample]) -> Batch:
    patches = torch.from_numpy(np.stack([s.image.patches for s in samples]))
    text = torch.tensor([s.question_tokens for s in samples], dtype=torch.long)
    targets = torch.cat([text[:, 1:], torch.tensor([[s.answer_tokens[0]] for s in samples])], dim=1)
    mask = torch.tensor([s.answer_mask for s in samples], dtype=torch.bool)
    answers = torch.tensor([s.answer_tokens[0] for s in samples], dtype=torch.long)
    return Batch(patches, text, targets, mask, answers, [s.task_kind for s in samples])


def make_batch(seeds: Iterable[int], kinds: Iterable[str], vocab: Vocab | None = None) -> Batch:
    vocab = vocab or Vocab()
    return collate([generate_sample(int(s), k, vocab) for s, k in zip(seeds, kinds)])


# ---------------------------------------------------------------------------
# Record format: each record is <u32 payload length><payload><b"\n">, all
# integers little-endian. Payload layout:
#   u64 seed | u8 task kind | u8 rows | u8 cols | N*3 u8 patch attributes
#   u8 global label | u8 query row | u8 query col
#   u16 n_question + n_question*u16 | u16 n_answer + n_answer*u16
#   u16 n_mask + n_mask*u8
# ---------------------------------------------------------------------------


def encode_sample(sample: QuerySample) -> bytes:
    rows, cols = sample.image.patch_grid
    parts = [
        struct.pack("<QBBB", sample.seed, TASK_KINDS.index(sample.task_kind), rows, cols),
        sample.image.patches.astype("<u1").tobytes(),
        struct.pack("<BBB", sample.image.global_label, *sample.query),
        struct.pack(f"<H{len(sample.question_tokens)}H", len(sample.question_tokens), *sample.question_tokens),
        struct.pack(f"<H{len(sample.answer_tokens)}H", len(sample.answer_tokens), *sample.answer_tokens),
        struct.pack(f"<H{len(sample.answer_mask)}B", len(sample.answer_mask), *sample.answer_mask),
    ]
    payload = b"".join(parts)
    return struct.pack("<I", len(payload)) + payload + b"\n"


def decode_sample(buf: bytes) -> tuple[QuerySample, int]:
    """Decode one record from the front of ``buf``; returns (sample, bytes consumed)."""
    if len(buf) < 4:
        raise ValueError("truncated record header")
    (length,) = struct.unpack_from("<I", buf, 0)
    end = 4 + length
    if len(buf) < end + 1 or buf[end : end + 1] != b"\n":
        raise ValueError("truncated or undelimited record")
    off = 4
    seed, kind, rows, cols = struct.unpack_from("<QBBB", buf, off)
    off += 11
    n = rows * cols
    patches = np.frombuffer(buf, dtype="<u1", count=3 * n, offset=off).reshape(n, 3).astype(np.int64)
    off += 3 * n
    label, qr, qc = struct.unpack_from("<BBB", buf, off)
    off += 3
    fields = []
    for fmt in ("H", "H", "B"):
        (count,) = struct.unpack_from("<H", buf, off)
        off += 2
        fields.append(struct.unpack_from(f"<{count}{fmt}", buf, off))
        off += count * struct.calcsize(fmt)
    if off != end:
        raise ValueError("record length does not match its fields")
    question, answer, mask = fields
    sample = QuerySample(
        seed=seed,
        image=SyntheticImage((rows, cols), patches, label),
        question_tokens=tuple(question),
        answer_tokens=tuple(answer),
        task_kind=TASK_KINDS[kind],
        answer_mask=tuple(bool(m) for m in mask),
        query=(qr, qc),
    )
    return sample, end + 1


def write_records(path, samples: Iterable[QuerySample]) -> int:
    count = 0
    with open(path, "wb") as f:
        for s in samples:
            f.write(encode_sample(s))
            count += 1
    return count


def read_records(path) -> list[QuerySample]:
    buf = Path(path).read_bytes()
    out, off = [], 0
    while off < len(buf):
        sample, used = decode_sample(buf[off:])
        out.append(sample)
        off += used
    return out


# ---------------------------------------------------------------------------
# Linear-readout probes used to check what a feature layer carries.
# ---------------------------------------------------------------------------


def probe_accuracy(
    train_x: Tensor,
    train_y: Tensor,
    test_x: Tensor,
    test_y: Tensor,
    num_classes: int,
    hidden: int = 64,
    steps: int = 300,
    seed: int = 0,
) -> float:
    """Held-out accuracy of a one-hidden-layer MLP probe trained full-batch with Adam."""
    gen = torch.Generator().manual_seed(seed)
    x = train_x.double()
    mu, sd = x.mean(0), x.std(0).clamp_min(1e-6)
    x = (x - mu) / sd
    xt = (test_x.double() - mu) / sd
    d = x.shape[1]
    w1 = (torch.randn(d, hidden, generator=gen, dtype=torch.float64) / math.sqrt(d)).requires_grad_()
    b1 = torch.zeros(hidden, dtype=torch.float64, requires_grad=True)
    w2 = (torch.randn(hidden, num_classes, generator=gen, dtype=torch.float64) / math.sqrt(hidden)).requires_grad_()
    b2 = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    params = [w1, b1, w2, b2]
    opt = torch.optim.Adam(params, lr=1e-2)
    for _ in range(steps):
        opt.zero_grad()
        logits = torch.relu(x @ w1 + b1) @ w2 + b2
        loss = torch.nn.functional.cross_entropy(logits, train_y) + 1e-4 * (w1.square().sum() + w2.square().sum())
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = (torch.relu(xt @ w1 + b1) @ w2 + b2).argmax(-1)
    return float((pred == test_y).double().mean())
