"""Regenerate the bundled feeder files in src/voltreg/data/.

    python tools/make_feeders.py
"""

import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "voltreg" / "data"
FT_PER_MILE = 5280.0
OVERSIZE = 1.5
PV123_SCALE = 3.0

# IEEE 13-node overhead/underground configurations, ohm per mile
CONFIGS_13 = {
    "601": {"aa": (0.3465, 1.0179), "ab": (0.1560, 0.5017), "ac": (0.1580, 0.4236),
            "bb": (0.3375, 1.0478), "bc": (0.1535, 0.3849), "cc": (0.3414, 1.0348)},
    "602": {"aa": (0.7526, 1.1814), "ab": (0.1580, 0.4236), "ac": (0.1560, 0.5017),
            "bb": (0.7475, 1.1983), "bc": (0.1535, 0.3849), "cc": (0.7436, 1.2112)},
    "603": {"bb": (1.3294, 1.3471), "bc": (0.2066, 0.4591), "cc": (1.3238, 1.3569)},
    "604": {"aa": (1.3238, 1.3569), "ac": (0.2066, 0.4591), "cc": (1.3294, 1.3471)},
    "605": {"cc": (1.3292, 1.3475)},
    "606": {"aa": (0.7982, 0.4463), "ab": (0.3192, 0.0328), "ac": (0.2849, -0.0143),
            "bb": (0.7891, 0.4041), "bc": (0.3192, 0.0328), "cc": (0.7982, 0.4463)},
    "607": {"aa": (1.3425, 0.5124)},
}


def segment(config, feet):
    miles = feet / FT_PER_MILE
    return {k: [round(r * miles, 8), round(x * miles, 8)] for k, (r, x) in CONFIGS_13[config].items()}


def ieee13():
    # node 670 (distributed-load midpoint) is merged into the 632-671 segment;
    # the 671-692 switch is a 50 ft stretch of configuration 601
    lines = [
        ("650-632", "650", "632", segment("601", 2000)),
        ("632-633", "632", "633", segment("602", 500)),
        ("633-634", "633", "634", "xfm"),
        ("632-645", "632", "645", segment("603", 500)),
        ("645-646", "645", "646", segment("603", 300)),
        ("632-671", "632", "671", segment("601", 2000)),
        ("671-680", "671", "680", segment("601", 1000)),
        ("671-684", "671", "684", segment("604", 300)),
        ("684-611", "684", "611", segment("605", 300)),
        ("684-652", "684", "652", segment("607", 800)),
        ("671-692", "671", "692", segment("601", 50)),
        ("692-675", "692", "675", segment("606", 500)),
    ]
    # XFM-1: 500 kVA, R = 1.1 %, X = 2 % on its own base -> 5000 kVA system base
    xfm = {ph * 2: [0.011 * 10, 0.02 * 10] for ph in "abc"}

    loads = {
        "632": {"a": [8.5, 5.0], "b": [33.0, 19.0], "c": [58.5, 34.0]},
        "634": {"a": [160, 110], "b": [120, 90], "c": [120, 90]},
        "645": {"b": [170, 125]},
        "646": {"b": [115, 66], "c": [115, 66]},
        "652": {"a": [128, 86]},
        "671": {"a": [393.5, 225.0], "b": [418.0, 239.0], "c": [443.5, 254.0]},
        "675": {"a": [485, 190], "b": [68, 60], "c": [290, 212]},
        "692": {"a": [85, 75.5], "c": [85, 75.5]},
        "611": {"c": [170, 80]},
    }
    phases = {"650": "abc", "632": "abc", "633": "abc", "634": "abc", "645": "bc",
              "646": "bc", "671": "abc", "680": "abc", "684": "ac", "611": "c",
              "652": "a", "692": "abc", "675": "abc"}
    # PV rated at 52 % of the local peak load with oversized inverters;
    # no PV at 680, 684, 692 and 652
    pv_buses = {"632", "634", "645", "646", "671", "675", "611"}
    buses = []
    for label in ["650", "632", "633", "634", "645", "646", "671", "680", "684",
                  "611", "652", "692", "675"]:
        bus = {"id": label, "phases": phases[label]}
        if label in loads:
            bus["load"] = loads[label]
        if label in pv_buses:
            pv = {}
            for ph, (p, q) in loads[label].items():
                rated = 0.52 * float(np.hypot(p, q))
                pv[ph] = {"s": round(OVERSIZE * rated, 3), "p": round(rated, 3), "c": 0.002}
            bus["pv"] = pv
        buses.append(bus)

    out_lines = []
    for lid, a, b, z in lines:
        if z == "xfm":
            out_lines.append({"id": lid, "from": a, "to": b, "units": "pu", "z": xfm})
        else:
            out_lines.append({"id": lid, "from": a, "to": b, "z": z})
    return {
        "name": "ieee13",
        "base_kva": 5000.0,
        "base_kv": 4.16,
        "v0_squared": 1.0,
        "source": "650",
        "buses": buses,
        "lines": out_lines,
        "normally_open": [],
        "events": [],
    }


def chain():
    return {
        "name": "chain",
        "base_kva": 3.0,
        "base_kv": 1.0,
        "per_unit": True,
        "v0_squared": 1.0,
        "buses": [
            {"id": "0", "phases": "a"},
            {"id": "1", "phases": "a", "load": {"a": [0.02, 0.01]}},
            {"id": "2", "phases": "a", "load": {"a": [0.01, 0.005]},
             "pv": {"a": {"s": 0.05, "p": 0.03, "c": 0.0}}},
        ],
        "lines": [
            {"id": "L1", "from": "0", "to": "1", "z": {"aa": [1.0, 1.0]}},
            {"id": "L2", "from": "1", "to": "2", "z": {"aa": [1.0, 1.0]}},
        ],
    }


# IEEE 123-node configuration 1 (three-phase overhead) and 9 (single-phase), ohm/mile
CFG1 = {"aa": (0.4576, 1.0780), "ab": (0.1560, 0.5017), "ac": (0.1535, 0.3849),
        "bb": (0.4666, 1.0482), "bc": (0.1580, 0.4236), "cc": (0.4615, 1.0651)}
CFG9 = (1.3292, 1.3475)


def feeder123(seed=123):
    """Synthetic 123-bus radial feeder with the 97-197 / 151-300 switch pair.

    Topology and loads are randomly generated (the real IEEE 123-node data is
    not reproduced); bus labels, the two switches and the PV fleet follow the
    IEEE 123-node naming.
    """
    rng = np.random.default_rng(seed)
    parent = {}
    main = [str(i) for i in range(1, 97)] + ["151", "152", "160", "250", "350", "450"]
    # main section hangs off the source "150"; each bus picks a recent predecessor
    placed = ["150"]
    for lab in main:
        if lab == "151":
            parent[lab] = "51"
        else:
            window = placed[-12:]
            parent[lab] = window[int(rng.integers(len(window)))]
        placed.append(lab)
    parent["97"] = "96"
    parent["197"] = "97"
    sub = ["197"]
    for lab in [str(i) for i in range(98, 115)] + ["300"]:
        window = sub[-5:]
        parent[lab] = window[int(rng.integers(len(window)))]
        sub.append(lab)
    parent["300"] = "114"

    labels = ["150"] + main + ["97", "197"] + [str(i) for i in range(98, 115)] + ["300"]
    assert len(labels) == 123, len(labels)
    children = {lab: [] for lab in labels}
    for c, p in parent.items():
        children[p].append(c)

    protected = {"97", "197", "151", "300", "114", "51", "96"}
    pv_sites = {"32": 60, "51": 60, "64": 120, "76": 80, "80": 30, "93": 100, "114": 80}
    phases = {}
    for lab in labels:
        leaf = not children[lab]
        if leaf and lab not in protected and lab not in pv_sites and rng.random() < 0.35:
            phases[lab] = "abc"[int(rng.integers(3))]
        else:
            phases[lab] = "abc"

    buses = []
    for lab in labels:
        bus = {"id": lab, "phases": phases[lab]}
        if lab != "150" and rng.random() < 0.7:
            kw = float(np.round(rng.uniform(5, 20), 1))
            bus["load"] = {ph: [kw, round(0.5 * kw, 1)] for ph in phases[lab]}
        if lab in pv_sites:
            rated = PV123_SCALE * pv_sites[lab] / 3.0
            bus["pv"] = {ph: {"s": round(OVERSIZE * rated, 4), "p": round(rated, 4), "c": 0.002}
                         for ph in "abc"}
        buses.append(bus)

    def z_line(feet, ph):
        miles = feet / FT_PER_MILE
        if ph == "abc":
            return {k: [round(r * miles, 8), round(x * miles, 8)] for k, (r, x) in CFG1.items()}
        return {ph * 2: [round(CFG9[0] * miles, 8), round(CFG9[1] * miles, 8)]}

    lines = []
    for lab in labels[1:]:
        p = parent[lab]
        if (p, lab) == ("97", "197"):
            lines.append({"id": "sw97-197", "from": p, "to": lab, "z": z_line(50, "abc")})
            continue
        feet = float(np.round(rng.uniform(100, 350), 0))
        lines.append({"id": f"{p}-{lab}", "from": p, "to": lab, "z": z_line(feet, phases[lab])})
    lines.append({"id": "tie151-300", "from": "151", "to": "300", "z": z_line(300, "abc")})

    return {
        "name": "feeder123",
        "base_kva": 5000.0,
        "base_kv": 4.16,
        "v0_squared": 1.0,
        "source": "150",
        "buses": buses,
        "lines": lines,
        "normally_open": ["tie151-300"],
        "events": [{"t": 20, "open": "sw97-197", "close": "tie151-300"}],
    }


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, doc in [("chain", chain()), ("ieee13", ieee13()), ("feeder123", feeder123())]:
        (OUT / f"{name}.json").write_text(json.dumps(doc, indent=1) + "\n")
        print("wrote", OUT / f"{name}.json")


if __name__ == "__main__":
    main()
