from dnescope.esni.keys import *
