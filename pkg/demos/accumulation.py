"""Why tiny per-sample perturbations add up on long waveforms.

For a linear unit ``w . x`` the sign perturbation ``eps * sign(w)`` moves the
activation by ``eps * sum|w_i|``, which grows linearly with the number of
inputs while the per-sample change stays at ``eps``.  Waveforms have tens of
thousands of samples, so even ``eps = 1e-3`` shifts activations a lot.

    python3 demos/accumulation.py
"""

import numpy as np

from wavadv import accumulation_effect


def main():
    rng = np.random.default_rng(0)
    eps = 1e-3
    print(f"eps = {eps}; weights ~ N(0, 1/n) so |w . x| stays O(1)")
    print("      n   |delta activation|   typical |w . x|")
    for n in (100, 1_000, 10_000, 96_000):
        w = rng.standard_normal(n) / np.sqrt(n)
        x = rng.uniform(0, 1, n) - 0.5
        r = accumulation_effect(w, eps)
        print(f"{n:7d}   {r.delta_activation:18.4f}   {abs(w @ x):15.4f}")


if __name__ == "__main__":
    main()
