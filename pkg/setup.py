from setuptools import setup, find_packages

version = "0.1.0"

with open("README.md", "r", encoding="utf-8") as readme_file:
    long_description = readme_file.read()

setup(
    name="capsattack",
    version=version,
    description="Capsule networks, attacks on their votes and reconstruction-based detection",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=("tests", "tests.*")),
    package_data={"capsattack": ["presets.json"]},
    entry_points={"console_scripts": ["capsattack=capsattack.cli:main"]},
    classifiers=[
        "Programming Language :: Python :: 3",
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Software Development :: Libraries :: Python Modules",
    ],
    install_requires=["numpy>=1.20", "scipy"],
    extras_require={
        "test": ["pytest"],
        "docs": ["Sphinx", "myst-parser", "furo"],
    },
    python_requires=">=3.8",
)
