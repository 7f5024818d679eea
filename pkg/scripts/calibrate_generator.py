#!/usr/bin/env python3
"""Scan the synthetic-field constants and print candidates whose full-mesh
ultimate-frame peak attenuation lands near 20% for both stress and PEEQ,
with localized peaks on the full and tiny meshes.

The winning constants are committed as BeamSpec defaults; re-run this
script if the field model changes.
"""

import itertools
import sys

import numpy as np

from meshgru.beam_gen import (
    BeamSpec,
    FULL_DIVISIONS,
    TINY_DIVISIONS,
    generate_case,
    peak_localization_fraction,
)
from meshgru.mesh_graph import build_incidence
from meshgru.projection import attenuation_report


_INCIDENCE = {}


def assess(spec: BeamSpec) -> dict:
    out = {}
    for name, divisions in (("full", FULL_DIVISIONS), ("tiny", TINY_DIVISIONS)):
        case = generate_case(spec, (0.0, 0.0), 21, divisions)
        if name not in _INCIDENCE:
            _INCIDENCE[name] = build_incidence(case.connectivity, case.n_nodes)
        inc = _INCIDENCE[name]
        rep_s = attenuation_report(case.s[-1], inc)
        rep_p = attenuation_report(case.peeq[-1], inc)
        out[name] = {
            "s_att": rep_s.reduction_percent,
            "p_att": rep_p.reduction_percent,
            "s_peak": rep_s.original_peak,
            "p_peak": rep_p.original_peak,
            "locality": peak_localization_fraction(case),
            "peeq_support": float(np.mean(case.peeq[-1] > 0)),
        }
    return out


def main() -> int:
    candidates = []
    for amp, width, cap, onset in itertools.product(
        (25.0, 30.0, 35.0, 40.0),
        (0.9, 1.0, 1.1, 1.2, 1.4),
        (60.0, 75.0, 90.0),
        (2.0, 4.0, 6.0, 8.0, 10.0),
    ):
        spec = BeamSpec(
            conc_amplitude=amp,
            conc_width_x=width,
            conc_width_y=width,
            stress_cap=cap,
            peeq_onset=onset,
        )
        try:
            spec.validate()
        except Exception:
            continue
        r = assess(spec)
        full, tiny = r["full"], r["tiny"]
        # Bands per the acceptance gate (10-35% around ~20%); localization
        # is enforced on the production 25 mm mesh.  The 48-element tiny
        # mesh cannot hold a smooth-yet-localized field, so it only has to
        # keep nonzero, positively-attenuating peaks.
        ok = (
            10.0 < full["s_att"] < 35.0
            and 10.0 < full["p_att"] < 35.0
            and full["locality"] < 0.20
            and tiny["p_peak"] > 0
            and tiny["s_att"] > 0
            and tiny["p_att"] > 0
        )
        # Rank by closeness to ~20% attenuation, discounted by how much of
        # the mesh accumulates plastic strain (prefer sparse plasticity).
        score = (
            abs(full["s_att"] - 20.1)
            + abs(full["p_att"] - 20.3)
            + 5.0 * full["peeq_support"]
        )
        row = (score, amp, width, cap, onset, full, tiny)
        if ok:
            candidates.append(row)

    candidates.sort(key=lambda r: r[0])
    if not candidates:
        print("no candidate satisfied all constraints")
        return 1
    for score, amp, width, cap, onset, full, tiny in candidates[:12]:
        print(
            f"score={score:5.2f} amp={amp:5.1f} width={width:3.1f} "
            f"cap={cap:4.1f} onset={onset:4.1f} | "
            f"full s_att={full['s_att']:5.2f} p_att={full['p_att']:5.2f} "
            f"loc={full['locality']:4.2f} s_peak={full['s_peak']:5.2f} "
            f"p_peak={full['p_peak']:.4f} | "
            f"tiny s_att={tiny['s_att']:5.2f} p_att={tiny['p_att']:5.2f} "
            f"loc={tiny['locality']:4.2f} peeq>0 {tiny['peeq_support']:4.2f}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
