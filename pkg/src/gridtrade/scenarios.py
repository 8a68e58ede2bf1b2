"""Bundled scenario definitions.

``ring4()`` is the reference experiment: four DGUs on a ring, mixed-unit
physical parameters, a simultaneous load reduction at t = 5 s.  Returned
as a plain JSON-ready dict so it can be dumped to a scenario file or
customised before parsing.
"""

from __future__ import annotations

import copy
import json

from .engine import Scenario

_RING4 = {
    "name": "ring4",
    "topology": {
        "n": 4,
        "edges": [[1, 2], [2, 3], [3, 4], [4, 1]],
        "managers": [1, 2, 3, 1],
    },
    "dgus": [
        {"L": "1.8 mH", "C": "2.2 mF", "R": "20 mOhm", "I_ref": "0 A",
         "u_ref": "0 V", "V_ref": "380 V", "V_min": "377 V", "V_max": "383 V",
         "Z_L": "16 Ohm", "I_L": "30 A"},
        {"L": "2.0 mH", "C": "1.9 mF", "R": "18 mOhm", "I_ref": "0 A",
         "u_ref": "0 V", "V_ref": "380 V", "V_min": "377 V", "V_max": "383 V",
         "Z_L": "50 Ohm", "I_L": "15 A"},
        {"L": "3.0 mH", "C": "2.5 mF", "R": "16 mOhm", "I_ref": "0 A",
         "u_ref": "0 V", "V_ref": "380 V", "V_min": "377 V", "V_max": "383 V",
         "Z_L": "16 Ohm", "I_L": "30 A"},
        {"L": "2.2 mH", "C": "1.7 mF", "R": "15 mOhm", "I_ref": "0 A",
         "u_ref": "0 V", "V_ref": "380 V", "V_min": "377 V", "V_max": "383 V",
         "Z_L": "20 Ohm", "I_L": "26 A"},
    ],
    "lines": [
        {"R": "70 mOhm", "L": "2.1 uH", "Il_min": "-20 A", "Il_max": "20 A",
         "Il_ref": "0 A"},
        {"R": "50 mOhm", "L": "2.0 uH", "Il_min": "-20 A", "Il_max": "20 A",
         "Il_ref": "0 A"},
        {"R": "80 mOhm", "L": "3.0 uH", "Il_min": "-20 A", "Il_max": "20 A",
         "Il_ref": "0 A"},
        {"R": "60 mOhm", "L": "2.2 uH", "Il_min": "-20 A", "Il_max": "20 A",
         "Il_ref": "0 A"},
    ],
    "price": {"l": 5.0, "p_r": 0.01},
    "weights": [
        {"r": 1.0060, "alpha_I": 10.6569, "alpha_V": 0.7516,
         "alpha_u": 1.0155, "alpha_Il": 1.3724},
        {"r": 1.0399, "alpha_I": 10.6280, "alpha_V": 0.6203,
         "alpha_u": 1.9841, "alpha_Il": 1.1981},
        {"r": 1.0527, "alpha_I": 10.2920, "alpha_V": 0.8527,
         "alpha_u": 1.1672, "alpha_Il": 1.4897},
        {"r": 1.0417, "alpha_I": 10.4317, "alpha_V": 0.9379,
         "alpha_u": 1.1060, "alpha_Il": 1.3395},
    ],
    "penalties": {
        "rho_V": [1200, 1200, 1200, 1200],
        "rho_Il": [1000, 1000, 1000, 1000],
    },
    "controller": {"eps_fast": 0.01, "eps_u": 0.1},
    "integrator": {"method": "rk4", "dt": "1e-5 s", "t_end": "10 s"},
    "events": [{"time": "5 s", "d_IL": "3 A", "d_ZL": "3 Ohm"}],
    "output": {"sample_period": "1e-3 s"},
    "initial": {"plant": "equilibrium", "controller": "zeros"},
}


def ring4_dict(**overrides) -> dict:
    """Deep copy of the reference scenario, with optional top-level overrides."""
    d = copy.deepcopy(_RING4)
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(d.get(key), dict):
            d[key].update(val)
        else:
            d[key] = val
    return d


def ring4(**overrides) -> Scenario:
    """Parsed reference scenario."""
    return Scenario.from_dict(ring4_dict(**overrides))


def write_scenario(d: dict, path):
    with open(path, "w") as f:
        json.dump(d, f, indent=2)
        f.write("\n")
