from setuptools import setup, find_packages

setup(
    name="lodslab",
    version="0.1.0",
    description="Score-distillation lab: SDS, DDS, VSD and learnable-unconditional (LODS) priors on small diffusion models",
    packages=find_packages(exclude=["examples", "examples.*"]),
    install_requires=[
        "annotated-types",
        "numpy",
        "pillow",
        "pydantic",
        "pydantic_core",
        "pytest",
        "python-dotenv",
        "scipy",
        "tomlkit",
        "tqdm",
        "typing-inspection",
        "typing_extensions",
    ],
    python_requires=">=3.10",
    include_package_data=True,
    entry_points={"console_scripts": ["lodslab=lodslab.main:main"]},
)
