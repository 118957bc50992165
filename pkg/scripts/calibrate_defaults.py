#!/usr/bin/env python3
"""Regenerate the frozen default noise parameters.

Solves for the tracking FLE and C-Arm pixel sigma that reproduce the target
mean registration RMSE values (0.99 mm point-based, 1.04 mm automatic-2D),
then prints the constants to paste into study.py
(DEFAULT_POINT_FLE_MM / DEFAULT_PIXEL_SIGMA_PX).
"""

from spinenav import study as st


def main():
    pb = st.calibrate_noise(0.99, st.POINT_BASED, samples=500)
    print(f"point-based : {pb}")
    a2 = st.calibrate_noise(1.04, st.AUTOMATIC_2D, samples=300)
    print(f"automatic-2d: {a2}")
    print()
    print(f"DEFAULT_POINT_FLE_MM = {pb['point_fle_mm']}")
    print(f"DEFAULT_PIXEL_SIGMA_PX = {a2['pixel_sigma_px']}")


if __name__ == "__main__":
    main()
