#!/usr/bin/env python3
"""
Setup script for Tri-branch Neural Fusion.

This setup.py file provides an alternative installation method
for environments that don't support pyproject.toml.
"""

from setuptools import setup, find_packages
import pathlib

# Read the contents of README file
this_directory = pathlib.Path(__file__).parent
long_description = (this_directory / "README.md").read_text(encoding="utf-8")

setup(
    name="tri-branch-fusion",
    version="0.1.0",
    author="Your Name",
    author_email="your.email@example.com",
    description=(
        "Tri-branch neural fusion of 3D images and tabular records, with "
        "label-inconsistency training, ensemble inference and "
        "explainability"
    ),
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*"]),
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
    ],
    python_requires=">=3.10",
    install_requires=[
        "numpy>=1.26.0",
        "scipy>=1.11.0",
        "scikit-learn>=1.3.0",
        "click>=8.1.0",
        "pandas>=2.0.0",
        "pyyaml>=6.0.1",
    ],
    extras_require={
        "dev": [
            "pytest>=7.4.0",
            "black>=23.0.0",
            "flake8>=6.0.0",
            "mypy>=1.5.0",
            "types-pyyaml>=6.0.12",
        ]
    },
    entry_points={"console_scripts": ["tnf=tri_branch_fusion.cli:main"]},
    include_package_data=True,
    zip_safe=False,
)
