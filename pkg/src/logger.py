"""
Console and file logger for profiling sweeps, training runs and simulations.
"""

import os
import time
from datetime import datetime
from enum import Enum


class Color(Enum):
    """ANSI color codes for terminal output."""

    RESET = "\033[0m"
    BOLD = "\033[1m"

    RED = "\033[31m"
    GREEN = "\033[32m"
    YELLOW = "\033[33m"
    BLUE = "\033[34m"
    MAGENTA = "\033[35m"
    CYAN = "\033[36m"
    WHITE = "\033[37m"

    BRIGHT_BLACK = "\033[90m"
    BRIGHT_YELLOW = "\033[93m"
    BRIGHT_BLUE = "\033[94m"
    BRIGHT_MAGENTA = "\033[95m"
    BRIGHT_CYAN = "\033[96m"
    BRIGHT_WHITE = "\033[97m"


# Decision reasons get a stable color in the decision trace
REASON_COLORS = {
    "qos-feasible-max-efficiency": Color.GREEN,
    "fallback-max-throughput": Color.YELLOW,
    "budget-constrained-max-throughput": Color.BLUE,
    "fallback-min-power": Color.RED,
    "hold-hysteresis": Color.BRIGHT_BLACK,
    "exhaustive": Color.MAGENTA,
}


class RunLogger:
    """Logger for one command run."""

    Color = Color

    def __init__(self, log_to_file=True, log_dir="logs", quiet=False):
        """
        Initialize the run logger.

        Args:
            log_to_file (bool): Whether to log to a file in addition to console.
            log_dir (str): Directory to store log files.
            quiet (bool): Suppress console output (file logging continues).
        """
        self.log_to_file = log_to_file
        self.log_dir = str(log_dir)
        self.quiet = quiet
        self.log_file = None

        if log_to_file:
            os.makedirs(self.log_dir, exist_ok=True)
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
            self.log_file = open(f"{self.log_dir}/serving_run_{timestamp}.log", "w")

    def __del__(self):
        self.close()

    def close(self):
        """Close the log file."""
        if self.log_file:
            self.log_file.close()
            self.log_file = None

    def _write_to_file(self, text):
        if self.log_to_file and self.log_file:
            clean_text = text
            for color in Color:
                clean_text = clean_text.replace(color.value, "")
            self.log_file.write(clean_text + "\n")
            self.log_file.flush()

    def print(self, text, color=None, bold=False):
        """
        Print to the console (unless quiet) and to the log file without ANSI codes.

        Args:
            text (str): Text to print.
            color (Color, optional): Color to use.
            bold (bool, optional): Whether to make text bold.
        """
        prefix = (Color.BOLD.value if bold else "") + (color.value if color else "")
        formatted_text = f"{prefix}{text}{Color.RESET.value}" if prefix else text

        if not self.quiet:
            print(formatted_text)
        self._write_to_file(formatted_text)

    def header(self, text, color=Color.CYAN):
        """Print a header with a box around it."""
        width = len(text) + 4
        border = "+" + "-" * (width - 2) + "+"

        self.print("")
        self.print(border, color, bold=True)
        self.print(f"| {text} |", color, bold=True)
        self.print(border, color, bold=True)

    def event(self, text, color=Color.YELLOW):
        self.print(f"EVENT: {text}", color, bold=True)

    def error(self, text):
        self.print(f"ERROR: {text}", Color.RED, bold=True)

    def sweep_progress(self, model, done, total):
        """Log profiling progress for one model."""
        self.print(f"[{model}] {done}/{total} grid points measured", Color.BRIGHT_BLUE)

    def decision(self, node, t, point, reason, error, bias):
        """
        Log one applied controller decision.

        Args:
            node (str): Node label.
            t (float): Simulated time in seconds.
            point: The OperatingPoint now in effect.
            reason (str): Decision reason.
            error (float): Normalized throughput error.
            bias (float): Current throughput bias.
        """
        color = REASON_COLORS.get(reason, Color.WHITE)
        self.print(
            f"  t={t:8.1f}s {node}: cap={point.power_cap:.0f}W batch={point.batch_size} "
            f"({reason}, e={error:+.3f}, bias={bias:.3f})",
            color,
        )

    def log_profile_issue(self, model_name, issue_type, details):
        """
        Log profile-specific issues (skipped grid points, noise outliers).

        Args:
            model_name (str): The profile having issues.
            issue_type (str): Type of issue (e.g., "infeasible", "outlier").
            details (str): Additional details about the issue.
        """
        timestamp = time.strftime("%Y-%m-%d %H:%M:%S")
        log_message = f"[{timestamp}] PROFILE ISSUE: {model_name} - {issue_type} - {details}"

        self.print(log_message, Color.BRIGHT_YELLOW)

        if not self.log_to_file:
            return
        issue_dir = os.path.join(self.log_dir, "profile_issues")
        os.makedirs(issue_dir, exist_ok=True)
        short_name = model_name.replace("/", "_").replace(":", "_")
        with open(os.path.join(issue_dir, f"{short_name}_issues.log"), "a") as f:
            f.write(f"{log_message}\n")

    def stats(self, stats_dict, title="RUN SUMMARY"):
        """Log a summary dictionary, one nested level per node or policy."""
        self.header(title, Color.BRIGHT_CYAN)

        for key, value in stats_dict.items():
            if isinstance(value, dict):
                self.print(f"\n{key}:", Color.BRIGHT_MAGENTA, bold=True)
                for sub_key, sub_value in value.items():
                    if isinstance(sub_value, float):
                        self.print(f"  {sub_key}: {sub_value:.4f}", Color.BRIGHT_WHITE)
                    else:
                        self.print(f"  {sub_key}: {sub_value}", Color.BRIGHT_WHITE)
            elif isinstance(value, float):
                self.print(f"{key}: {value:.4f}", Color.BRIGHT_WHITE)
            else:
                self.print(f"{key}: {value}", Color.BRIGHT_WHITE)
