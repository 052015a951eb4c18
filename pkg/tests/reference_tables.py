"""Published per-dataset conditional MSK means and headroom values (kappa 0.9).

Each entry: (backbone, dataset) -> (msk_cond native, msk_cond with selector, printed SHI).
"""

MSK_SHI = {
    ("TransMIL", "NSCLC"): (7.33, 3.21, 0.562),
    ("TransMIL", "BRCA"): (5.65, 3.86, 0.317),
    ("TransMIL", "PANDA"): (16.5, 10.62, 0.357),
    ("ACMIL", "NSCLC"): (6.08, 1.79, 0.705),
    ("ACMIL", "BRCA"): (3.39, 2.25, 0.337),
    ("ACMIL", "PANDA"): (4.78, 3.09, 0.354),
    ("ABMIL", "NSCLC"): (2.65, 1.52, 0.425),
    ("ABMIL", "BRCA"): (1.10, 3.21, -1.914),
    ("ABMIL", "PANDA"): (4.08, 5.37, -0.319),
    ("CLAM-SB", "NSCLC"): (2.09, 1.57, 0.248),
    ("CLAM-SB", "BRCA"): (1.17, 4.16, -2.542),
    ("CLAM-SB", "PANDA"): (4.89, 4.81, 0.016),
    ("AttriMIL", "NSCLC"): (3.21, 2.16, 0.327),
    ("AttriMIL", "BRCA"): (3.52, 6.79, -0.931),
    ("AttriMIL", "PANDA"): (3.25, 4.35, -0.336),
    ("ASMIL", "NSCLC"): (1.36, 4.16, -2.055),
    ("ASMIL", "BRCA"): (15.83, 12.81, 0.191),
    ("ASMIL", "PANDA"): (11.20, 27.35, -1.441),
    ("MHIM-MIL", "NSCLC"): (2.77, 3.63, -0.309),
    ("MHIM-MIL", "BRCA"): (12.2, 14.94, -0.229),
    ("MHIM-MIL", "PANDA"): (5.30, 6.25, -0.179),
}

# Per-K probability drops on the grid 16, 32, 64, 128, 256 and the printed area.
DELETION_ROWS = {
    "ABMIL": ([0.023, 0.035, 0.057, 0.080, 0.116], 0.0736),
    "CLAM-SB": ([0.010, 0.025, 0.039, 0.061, 0.089], 0.0551),
}
