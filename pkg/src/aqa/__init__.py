"""Action quality assessment from clip features: C3D-SVR, C3D-LSTM and C3D-LSTM-SVR."""
