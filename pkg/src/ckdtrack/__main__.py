"""Makes CKDTrack executable."""
if "__main__" == __name__:
    from sys import argv, executable

    from ckdtrack.cli import main

    argv[0] = "%s -m ckdtrack" % executable
    main()
