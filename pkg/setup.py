from setuptools import setup, find_packages

setup(name='afnet_m',
      packages=find_packages(exclude=["tests"]),
      install_requires=["numpy", "scipy", "pandas", "ml-logger", "termcolor", "tqdm", "Pillow", "matplotlib"],
      extras_require={"test": ["pytest"]},
      entry_points={"console_scripts": ["afnet_m=afnet_m.cli:main"]},
      description='mask attention and adaptive 2D+3D feature fusion for facial expression recognition',
      version='0.1.0')
