"""Seeded generator for rating/trust data shaped like the Ciao and Epinions exports.

Users belong to latent communities; trust links mostly stay inside a
community and user taste vectors cluster around their community centre, so
the social graph carries real signal about ratings.  Ratings come from a
biased low-rank score quantized to 1..5 stars so that the star histogram
has the requested mean.  Item popularity and user activity are heavy-tailed.

Run ``python -m gtnrec.synthetic --preset ciao --out DIR`` to write
``ratings.csv`` and ``trust.csv``.
"""

from __future__ import annotations

import argparse
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .graph import RatingRecord, TrustRecord, write_ratings, write_trust

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int
    n_items: int
    n_ratings: int
    n_trust: int
    # star probabilities for 1..5
    stars: tuple[float, float, float, float, float]
    rank: int = 8
    communities: int = 40
    homophily: float = 0.8
    noise: float = 0.6

    def scaled(self, fraction: float) -> "SyntheticSpec":
        """Same shape with every count multiplied by ``fraction``."""
        return replace(
            self,
            n_users=max(2, round(self.n_users * fraction)),
            n_items=max(2, round(self.n_items * fraction)),
            n_ratings=max(2, round(self.n_ratings * fraction)),
            n_trust=max(1, round(self.n_trust * fraction)),
        )


CIAO = SyntheticSpec(7375, 105114, 288319, 111781, stars=(0.04, 0.05, 0.11, 0.30, 0.50))
EPINIONS = SyntheticSpec(18088, 261649, 764352, 355813, stars=(0.06, 0.07, 0.13, 0.33, 0.41))
PRESETS = {"ciao": CIAO, "epinions": EPINIONS}


def _heavy_tailed(rng, n, sigma):
    w = rng.lognormal(0.0, sigma, n)
    return w / w.sum()


def _unique_pairs(rng, n_target, first, sample, forbid_self=False, n_cols=None):
    """Grow a set of distinct (row, col) pairs by bulk sampling until ``n_target`` are found."""
    keys = np.unique(first[0] * n_cols + first[1])
    while keys.size < n_target:
        need = n_target - keys.size
        r, c = sample(int(need * 1.3) + 16)
        if forbid_self:
            keep = r != c
            r, c = r[keep], c[keep]
        fresh = np.setdiff1d(np.unique(r * n_cols + c), keys, assume_unique=True)
        keys = np.concatenate([keys, rng.permutation(fresh)[:need]])
    keys = rng.permutation(keys)
    return keys // n_cols, keys % n_cols


def generate(spec: SyntheticSpec, seed: int = 0) -> tuple[list[RatingRecord], list[TrustRecord]]:
    """Draw one dataset; identical ``(spec, seed)`` gives identical records."""
    if spec.n_ratings < max(spec.n_users, spec.n_items):
        raise ValueError("need at least one rating per user and per item")
    if spec.n_ratings > spec.n_users * spec.n_items:
        raise ValueError("more ratings than user-item pairs")
    rng = np.random.default_rng(seed)
    nu, ni = spec.n_users, spec.n_items

    community = rng.integers(spec.communities, size=nu)
    centres = rng.normal(0.0, 1.0, (spec.communities, spec.rank))
    user_f = centres[community] + rng.normal(0.0, 0.5, (nu, spec.rank))
    item_f = rng.normal(0.0, 1.0 / np.sqrt(spec.rank), (ni, spec.rank))
    user_bias = rng.normal(0.0, 0.4, nu)
    item_bias = rng.normal(0.0, 0.4, ni)
    activity = _heavy_tailed(rng, nu, 1.2)
    popularity = _heavy_tailed(rng, ni, 1.5)

    # every item and every user appears at least once
    cover_u = np.concatenate([rng.choice(nu, size=ni, p=activity), np.arange(nu)])
    cover_i = np.concatenate([np.arange(ni), rng.choice(ni, size=nu, p=popularity)])
    users, items = _unique_pairs(
        rng,
        spec.n_ratings,
        (cover_u, cover_i),
        lambda k: (rng.choice(nu, size=k, p=activity), rng.choice(ni, size=k, p=popularity)),
        n_cols=ni,
    )

    score = (
        user_bias[users]
        + item_bias[items]
        + np.einsum("ij,ij->i", user_f[users], item_f[items])
        + rng.normal(0.0, spec.noise, users.size)
    )
    cuts = np.quantile(score, np.cumsum(spec.stars)[:-1])
    stars = 1 + np.searchsorted(cuts, score)

    members = [np.flatnonzero(community == c) for c in range(spec.communities)]

    def sample_trust(k):
        src = rng.choice(nu, size=k, p=activity)
        dst = rng.integers(nu, size=k)
        local = rng.random(k) < spec.homophily
        for idx in np.flatnonzero(local):
            pool = members[community[src[idx]]]
            dst[idx] = pool[rng.integers(pool.size)]
        return src, dst

    empty = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    max_trust = nu * (nu - 1)
    t_src, t_dst = _unique_pairs(rng, min(spec.n_trust, max_trust), empty, sample_trust, forbid_self=True, n_cols=nu)

    ratings = [RatingRecord(f"u{u}", f"i{i}", float(s)) for u, i, s in zip(users, items, stars)]
    trust = [TrustRecord(f"u{a}", f"u{b}") for a, b in zip(t_src, t_dst)]
    return ratings, trust


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m gtnrec.synthetic", description=__doc__.split("\n\n")[0])
    ap.add_argument("--preset", choices=sorted(PRESETS), default="ciao")
    ap.add_argument("--scale", type=float, default=1.0, help="multiply every count by this factor")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args(argv)
    spec = PRESETS[args.preset]
    if args.scale != 1.0:
        spec = spec.scaled(args.scale)
    ratings, trust = generate(spec, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_ratings(args.out / "ratings.csv", ratings)
    write_trust(args.out / "trust.csv", trust)
    print(f"wrote {len(ratings)} ratings and {len(trust)} trust links to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
