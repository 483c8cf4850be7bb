"""Text-guided garment editing in the latent space of a small frozen generator.

Modules, bottom-up:

``ndgrad``     numpy tensors with reverse-mode differentiation
``stylegen``   latent mapping, layered W+ codes and a differentiable renderer
``embednet``   frozen joint text/image attribute embedding
``mapper``     attention and baseline latent mappers
``editops``    edit losses, mask merging, feature- and pixel-space masking
``trainer``    data streams, Adam with Lookahead, training, checkpoints
``metrics``    CLIP accuracy and masked background distance
``gradcheck``  finite-difference checks for every differentiable piece
``cli``        command-line front end
"""

__version__ = "0.1.0"
