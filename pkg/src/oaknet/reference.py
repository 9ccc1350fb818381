"""Published reference results on the clinical OAI/MOST datasets.

These numbers contextualise desk-scale runs.  The underlying radiograph
collections are access-restricted, so none of these values is reproducible
here and none is asserted by any test; they are reporting constants only.

Detection numbers score knee-joint localisation by Jaccard index; grading
numbers score 5-grade severity classification and continuous-grade
regression on the combined test sets.
"""

# knee-centre template matching, best of five template sets
TEMPLATE_MATCHING = {
    "true_positives": 116, "false_positives": 266, "precision": 0.303,
    "mean_ji": 0.1, "ji_gt_0": 0.544, "ji_ge_05": 0.083, "ji_ge_075": 0.031,
}

# linear SVM on Sobel horizontal gradients, sliding window
SVM_DETECTOR = {
    "test_accuracy": 0.942, "cv_accuracy": 0.952,
    "mean_ji": 0.36, "ji_gt_0": 0.818, "ji_ge_05": 0.386, "ji_ge_075": 0.102,
}

# best centre-detection FCN (aperture 66)
FCN_CENTER = {
    "ji_ge_025": 0.989, "ji_ge_05": 0.971, "ji_ge_075": 0.433,
    "mean_ji": 0.76, "std_ji": 0.12, "parameters_reported": 214_177,
}

# ROI-mode FCN detection
FCN_ROI = {
    "oai": {"ji_gt_0": 1.0, "ji_ge_05": 1.0, "ji_ge_075": 0.88,
            "mean_ji": 0.82, "std_ji": 0.06},
    "most": {"ji_gt_0": 0.997, "ji_ge_05": 0.988, "ji_ge_075": 0.806,
             "mean_ji": 0.80, "std_ji": 0.09},
    "combined": {"ji_gt_0": 1.0, "ji_ge_05": 1.0, "ji_ge_075": 0.922,
                 "mean_ji": 0.83, "std_ji": 0.06},
}

# severity grading on the combined dataset: accuracy and grade MSE
GRADING = {
    "wndchrm_baseline": {"accuracy": 0.348, "mse": 2.112},
    "fine_tuned_caffenet": {"accuracy": 0.576, "mse": 0.836},
    "cnn_classification": {"accuracy": 0.618, "mse": 0.735},
    "cnn_regression": {"accuracy": 0.547, "mse": 0.574, "mse_rounded": 0.661},
    "joint": {"accuracy": 0.646, "clsf_mse": 0.685, "reg_mse": 0.507},
    "ordinal": {"accuracy": 0.643, "mse": 0.480, "accuracy_rounded": 0.618,
                "mse_rounded": 0.504},
}

# per-grade precision/recall/F1 of the best jointly trained network
JOINT_PER_GRADE = {
    0: (0.68, 0.85, 0.75),
    1: (0.34, 0.07, 0.12),
    2: (0.53, 0.63, 0.57),
    3: (0.74, 0.77, 0.75),
    4: (0.86, 0.81, 0.84),
    "mean": (0.62, 0.65, 0.60),
}

# parameter totals reported for the grading networks; the joint figure
# disagrees with its own printed layer table (which sums to 3,082,310)
PARAMETERS_REPORTED = {
    "cnn_classification": 5_400_000,
    "cnn_regression": 5_600_000,
    "joint": 2_900_000,
}
