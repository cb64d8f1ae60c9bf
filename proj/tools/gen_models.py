#!/usr/bin/env python3
"""Regenerates the bundled two-class example models in models/.

Each class rides an on/off environment: active-state batch rate 2*lam/g,
switching rates 0.1 both ways, geometric batch sizes of mean g. Couplings:
  p: one shared environment (positively correlated streams), M=2
  i: independent environments combined by Kronecker sums, M=4
  n: one environment, the classes active in opposite states, M=2
Services are class-dependent (Det 1 / Det 4, "gd") or a shared two-point
mixture with the pooled law ("gi").
"""
import json
import os

OUT = os.path.join(os.path.dirname(__file__), "..", "models")


def kron(a, b):
    ra, ca, rb, cb = len(a), len(a[0]), len(b), len(b[0])
    return [
        [a[i // rb][j // cb] * b[i % rb][j % cb] for j in range(ca * cb)]
        for i in range(ra * rb)
    ]


def madd(a, b):
    return [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def build(coupling, class_dep, g, lam1, lam2):
    r1 = 2.0 * lam1 / g
    r2 = 2.0 * lam2 / g
    if coupling == "p":
        env_dim = 2
        C = [[-(r1 + r2) - 0.1, 0.1], [0.1, -0.1]]
        D1 = [[r1, 0.0], [0.0, 0.0]]
        D2 = [[r2, 0.0], [0.0, 0.0]]
    elif coupling == "i":
        env_dim = 4
        i2 = [[1.0, 0.0], [0.0, 1.0]]
        C1 = [[-r1 - 0.1, 0.1], [0.1, -0.1]]
        C2 = [[-r2 - 0.1, 0.1], [0.1, -0.1]]
        C = madd(kron(C1, i2), kron(i2, C2))
        D1 = kron([[r1, 0.0], [0.0, 0.0]], i2)
        D2 = kron(i2, [[r2, 0.0], [0.0, 0.0]])
    else:  # "n"
        env_dim = 2
        C = [[-r1 - 0.1, 0.1], [0.1, -r2 - 0.1]]
        D1 = [[r1, 0.0], [0.0, 0.0]]
        D2 = [[0.0, 0.0], [0.0, r2]]

    batch = {"alpha": [1.0], "P": [[1.0 - 1.0 / g]]}
    if class_dep:
        services = [
            {"kind": "Deterministic", "params": {"point": 1.0}},
            {"kind": "Deterministic", "params": {"point": 4.0}},
        ]
    else:
        w1 = lam1 / (lam1 + lam2)
        mix = {
            "kind": "DiscretePointMixture",
            "params": {"points": [1.0, 4.0], "weights": [w1, 1.0 - w1]},
        }
        services = [mix, mix]

    return {
        "env_dim": env_dim,
        "C": C,
        "classes": [
            {"D": D1, "batch": batch, "service": services[0]},
            {"D": D2, "batch": batch, "service": services[1]},
        ],
    }


def main():
    os.makedirs(OUT, exist_ok=True)
    sets = [(1, 0.15, 0.15, (1, 2, 3)), (2, 0.4, 0.1, (1,))]
    for ex, lam1, lam2, gs in sets:
        for coupling in "pin":
            for svc in ("gd", "gi"):
                for g in gs:
                    model = build(coupling, svc == "gd", float(g), lam1, lam2)
                    name = f"ex{ex}_{coupling}_{svc}_g{g}.json"
                    with open(os.path.join(OUT, name), "w") as f:
                        json.dump(model, f, indent=1)
                        f.write("\n")
                    print(name)


if __name__ == "__main__":
    main()
