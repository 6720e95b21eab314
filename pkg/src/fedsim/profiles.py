"""Built-in federation profiles.

Both profiles are reconstructions at toy scale: the per-institution sample
counts of the source federation are published only graphically, so the
numbers here are approximate by construction. They are pinned so that the
cost model reproduces the published budget table exactly: with 5-fold
splits, an 80:20 local train/validation split and batch size 4, the
challenge profile yields 198 total SGD steps per round with a maximum of 82
(institution 1, 511 samples), and its two largest institutions hold 71.4%
of all samples.

The limited profile mirrors the reduced, more balanced setup: the five
ungraded institutions (16, 18, 21, 22, 23) are dropped, four institutions
hold 35 samples each and low-grade samples make up roughly 30% of the 278
total. It is an independent reconstruction, not derived from the challenge
profile row by row.
"""

from __future__ import annotations

from typing import Mapping, Sequence

ProfileRow = tuple[int, int, Mapping[str, int] | None]

# institutions 12-15 hold only low-grade samples; 3 and 4 hold both grades;
# 16, 18, 21, 22 and 23 have no grade information (treated as high-grade
# stand-ins for data generation).
FETS2022_CHALLENGE: tuple[ProfileRow, ...] = (
    (1, 511, {"hgg": 511}),
    (2, 13, {"hgg": 13}),
    (3, 13, {"lgg": 6, "hgg": 7}),
    (4, 51, {"lgg": 10, "hgg": 41}),
    (5, 32, {"hgg": 32}),
    (6, 26, {"hgg": 26}),
    (7, 13, {"hgg": 13}),
    (8, 13, {"hgg": 13}),
    (9, 7, {"hgg": 7}),
    (10, 13, {"hgg": 13}),
    (11, 13, {"hgg": 13}),
    (12, 13, {"lgg": 13}),
    (13, 13, {"lgg": 13}),
    (14, 13, {"lgg": 13}),
    (15, 13, {"lgg": 13}),
    (16, 26, {"hgg": 26}),
    (17, 13, {"hgg": 13}),
    (18, 382, {"hgg": 382}),
    (19, 7, {"hgg": 7}),
    (20, 26, {"hgg": 26}),
    (21, 26, {"hgg": 26}),
    (22, 7, {"hgg": 7}),
    (23, 7, {"hgg": 7}),
)

# institutions without grade information in the challenge profile
UNGRADED_INSTITUTIONS: tuple[int, ...] = (16, 18, 21, 22, 23)

# institutions holding only low-grade samples (the prior-clustering split)
LGG_ONLY_INSTITUTIONS: tuple[int, ...] = (12, 13, 14, 15)

FETS2022_LIMITED: tuple[ProfileRow, ...] = (
    (1, 35, {"hgg": 35}),
    (2, 10, {"hgg": 10}),
    (3, 12, {"lgg": 6, "hgg": 6}),
    (4, 35, {"lgg": 15, "hgg": 20}),
    (5, 35, {"hgg": 35}),
    (6, 35, {"hgg": 35}),
    (7, 9, {"hgg": 9}),
    (8, 8, {"hgg": 8}),
    (9, 5, {"hgg": 5}),
    (10, 7, {"hgg": 7}),
    (11, 6, {"hgg": 6}),
    (12, 15, {"lgg": 15}),
    (13, 14, {"lgg": 14}),
    (14, 13, {"lgg": 13}),
    (15, 12, {"lgg": 12}),
    (17, 8, {"hgg": 8}),
    (19, 6, {"hgg": 6}),
    (20, 13, {"hgg": 13}),
)

BUILTIN_PROFILES: dict[str, tuple[ProfileRow, ...]] = {
    "fets2022_challenge": FETS2022_CHALLENGE,
    "fets2022_limited": FETS2022_LIMITED,
}


def profile_sizes(profile: Sequence[ProfileRow]) -> dict[int, int]:
    return {client_id: count for client_id, count, _ in profile}


def profile_total(profile: Sequence[ProfileRow]) -> int:
    return sum(count for _, count, _ in profile)


def prior_grade_assignment(profile: Sequence[ProfileRow]) -> dict[int, str]:
    """Two-way prior clustering: LGG-only institutions versus the rest."""
    return {client_id: ("lgg" if client_id in LGG_ONLY_INSTITUTIONS else "hgg")
            for client_id, _, _ in profile}
