"""
Theme Colors Module for the Continual Unlearning Platform
Provides the palette used by the report plots
"""

# Color palette shared by every generated figure
COLORS = {
    "primary": {
        "500": "#667eea",  # Primary blue
    },

    "secondary": {
        "500": "#764ba2",  # Primary purple
    },

    "accent": {
        "green": "#10b981",    # Success green
        "red": "#ef4444",      # Error red
        "orange": "#f97316",   # Orange accent
    },

    "neutral": {
        "gray": {
            "300": "#d1d5db",  # Light gray
            "500": "#6b7280",  # Medium gray
        },
    },
}

# One fixed color per reported metric
METRIC_COLORS = {
    "crr": COLORS["primary"]["500"],
    "rr": COLORS["secondary"]["500"],
    "delta_rr": COLORS["accent"]["orange"],
    "ar": COLORS["accent"]["green"],
    "specificity": COLORS["accent"]["red"],
}


def get_metric_color(metric):
    """Color for a metric column; unknown metrics fall back to gray."""
    return METRIC_COLORS.get(metric, COLORS["neutral"]["gray"]["500"])
