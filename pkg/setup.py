#!/usr/bin/env python3
"""
Setup script for CondenseNetV2 SFR

Handles installation, dependency management, and the command-line entry points.
"""

from setuptools import setup, find_packages
from pathlib import Path
import sys

# Read README for long description
README_PATH = Path(__file__).parent / "README.md"
if README_PATH.exists():
    with open(README_PATH, "r", encoding="utf-8") as f:
        long_description = f.read()
else:
    long_description = "CondenseNetV2 - dense networks with sparse feature reactivation, in numpy"

# Read requirements
def read_requirements(filename):
    """Read requirements from file."""
    req_path = Path(__file__).parent / filename
    if req_path.exists():
        with open(req_path, "r") as f:
            return [line.strip() for line in f if line.strip() and not line.startswith("#")]
    return []

# Core requirements (test tooling lives in the dev extra)
dev_requirements = [
    "pytest>=7.0.0",
    "black>=23.0.0",
    "flake8>=6.0.0",
]
requirements = [r for r in read_requirements("requirements.txt") if r not in dev_requirements]

extras_require = {
    "dev": dev_requirements,
}

# Package metadata
setup(
    name="condensenet-v2-sfr",
    version="1.0.0",
    author="CondenseNetV2 SFR",
    author_email="developer@example.com",
    description="CondenseNetV2 with sparse feature reactivation: training, compilation and analysis",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(include=["src", "src.*", "config", "config.*"]),
    py_modules=["main"],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
    install_requires=requirements,
    extras_require=extras_require,
    entry_points={
        "console_scripts": [
            "condensenet=main:main",
            "cnv2=main:main",  # Short alias
        ],
    },
    include_package_data=True,
    data_files=[("presets", [str(p) for p in sorted(Path("presets").glob("*.json"))])],
    keywords=[
        "condensenet", "densenet", "pruning", "group-convolution", "sparse-feature-reactivation",
        "numpy", "efficient-cnn"
    ],
)


if __name__ == "__main__" and len(sys.argv) == 1:
    print("🧱 CondenseNetV2 SFR setup: run `pip install -e .[dev]` to install with test tooling")
