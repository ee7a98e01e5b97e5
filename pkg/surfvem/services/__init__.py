# Services package for numerical building blocks
