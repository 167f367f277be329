from setuptools import find_packages, setup

# Package metadata
NAME = "apga"
VERSION = "0.1.0"
DESCRIPTION = "Adversarial policy gradient augmentation: a mask policy rewarded by a classifier's loss"
URL = "https://github.com/NVA-Lab/apga"
AUTHOR = "KIST-NVA Lab"
LICENSE = "Apache 2.0"

# Read the contents of README file
with open("README.md", "r", encoding="utf-8") as f:
    LONG_DESCRIPTION = f.read()

# Required dependencies
REQUIRED_PACKAGES = [
    "torch>=2.3.1",
    "numpy>=1.24.4",
    "tqdm>=4.66.1",
    "hydra-core>=1.3.2",
    "omegaconf>=2.3.0",
    "pillow>=9.4.0",
    "pandas>=2.2.3",
    "matplotlib>=3.9.1",
]

EXTRA_PACKAGES = {
    "dev": [
        "pytest>=8.0.0",
        "black",
        "ruff",
    ],
}


setup(
    name=NAME,
    version=VERSION,
    description=DESCRIPTION,
    long_description=LONG_DESCRIPTION,
    long_description_content_type="text/markdown",
    url=URL,
    author=AUTHOR,
    license=LICENSE,
    python_requires=">=3.10",
    package_dir={"": "src"},
    packages=find_packages(where="src", include=["apga", "apga.*"]),
    package_data={"apga": ["configs/models/*.yaml", "configs/experiments/*.json"]},
    install_requires=REQUIRED_PACKAGES,
    extras_require=EXTRA_PACKAGES,
    entry_points={"console_scripts": ["apga=apga.harness.cli:main"]},
)
