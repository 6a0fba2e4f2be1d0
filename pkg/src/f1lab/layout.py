"""Joint-sequence layout and the progressive attention mask.

The mask is the whole cross-expert contract: understanding tokens see
only themselves, generation tokens see understanding plus earlier (and
their own) scales, action tokens see everything. Reverse flow is
forbidden outright.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LayoutError

UND, GEN, ACT = "UND", "GEN", "ACT"
_TAGS = (UND, GEN, ACT)


@dataclass(frozen=True)
class Segment:
    expert: str
    length: int
    scale_id: int | None = None


@dataclass(frozen=True)
class SegmentLayout:
    segments: tuple

    def __post_init__(self):
        if not self.segments:
            raise LayoutError("layout needs at least one segment")
        last_phase = 0
        last_scale = None
        for seg in self.segments:
            if seg.expert not in _TAGS:
                raise LayoutError(f"unknown expert tag {seg.expert!r}")
            if seg.length < 1:
                raise LayoutError(f"segment length {seg.length} < 1")
            if (seg.scale_id is None) == (seg.expert == GEN):
                raise LayoutError("scale_id is required exactly for GEN segments")
            phase = _TAGS.index(seg.expert)
            if phase < last_phase:
                raise LayoutError("segments must be ordered UND, then GEN, then ACT")
            last_phase = phase
            if seg.expert == GEN:
                if last_scale is not None and seg.scale_id <= last_scale:
                    raise LayoutError("GEN scale_ids must be strictly increasing")
                last_scale = seg.scale_id

    @property
    def total_len(self) -> int:
        return sum(s.length for s in self.segments)

    def token_experts(self) -> np.ndarray:
        return np.concatenate([np.full(s.length, _TAGS.index(s.expert)) for s in self.segments])

    def token_scales(self) -> np.ndarray:
        """Per-token scale_id; -1 outside GEN."""
        out = []
        for s in self.segments:
            out.append(np.full(s.length, s.scale_id if s.expert == GEN else -1))
        return np.concatenate(out)

    def token_positions(self) -> np.ndarray:
        """Rotary positions restart at 0 for every segment."""
        return np.concatenate([np.arange(s.length) for s in self.segments])

    def segment_of(self, index: int) -> Segment:
        at = 0
        for s in self.segments:
            at += s.length
            if index < at:
                return s
        raise LayoutError(f"index {index} outside layout of length {self.total_len}")


@dataclass(frozen=True)
class AttentionMask:
    allow: np.ndarray

    def __post_init__(self):
        if self.allow.ndim != 2 or self.allow.shape[0] != self.allow.shape[1]:
            raise LayoutError("mask must be square")
        if not np.all(self.allow.any(axis=1)):
            raise LayoutError("mask has an all-false row")


def build_uga_mask(layout: SegmentLayout, gen_token_causal: bool = False) -> AttentionMask:
    """Vectorized construction of the progressive mask.

    allow(q,k) iff: both UND; both ACT; q GEN and k UND; q ACT and k in
    UND or GEN; both GEN with scale(k) < scale(q); both GEN at the same
    scale (bidirectional there unless gen_token_causal).
    """
    e = layout.token_experts()
    sc = layout.token_scales()
    und = e == 0
    gen = e == 1
    act = e == 2
    qk = lambda a, b: a[:, None] & b[None, :]
    same_scale = sc[:, None] == sc[None, :]
    if gen_token_causal:
        pos = np.arange(layout.total_len)
        same_scale = same_scale & (pos[None, :] <= pos[:, None])
    allow = (
        qk(und, und)
        | qk(act, act)
        | qk(gen, und)
        | qk(act, und | gen)
        | (qk(gen, gen) & (sc[None, :] < sc[:, None]))
        | (qk(gen, gen) & same_scale)
    )
    np.fill_diagonal(allow, True)
    return AttentionMask(allow)


def rule_oracle(layout: SegmentLayout, q: int, k: int, gen_token_causal: bool = False) -> bool:
    """Independent per-pair evaluation of the mask rules from segment
    metadata, for differential testing against build_uga_mask."""
    n = layout.total_len
    if not (0 <= q < n and 0 <= k < n):
        raise LayoutError("index outside layout")
    sq, sk = layout.segment_of(q), layout.segment_of(k)
    if q == k:
        return True
    if sq.expert == UND:
        return sk.expert == UND
    if sq.expert == ACT:
        return True  # ACT attends UND, GEN, and ACT alike
    # q is GEN
    if sk.expert == UND:
        return True
    if sk.expert == ACT:
        return False
    if sk.scale_id < sq.scale_id:
        return True
    if sk.scale_id == sq.scale_id:
        return (k <= q) if gen_token_causal else True
    return False


def layout_from_string(text: str) -> SegmentLayout:
    """Parse 'UND:2,GEN:4@0,GEN:16@1,ACT:3' into a SegmentLayout."""
    segs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            tag, rest = part.split(":")
            if "@" in rest:
                length, scale = rest.split("@")
                segs.append(Segment(tag.strip().upper(), int(length), int(scale)))
            else:
                segs.append(Segment(tag.strip().upper(), int(rest)))
        except ValueError as exc:
            raise LayoutError(f"cannot parse segment {part!r}") from exc
    return SegmentLayout(tuple(segs))


def mask_to_text(mask: AttentionMask) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in mask.allow)
