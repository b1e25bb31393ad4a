/**
 * Deterministic convolutional backbone zoo.
 *
 * Backbones are referenced by name and produce global-average-pooled
 * features. This environment has no access to hosted pretrained weights, so
 * each zoo entry is a fixed convolutional architecture whose weights are
 * generated from a PRNG seeded by the backbone name: inference is fully
 * deterministic and reproducible across runs and machines. Seeded random
 * projections preserve enough input geometry for the downstream pipeline's
 * format conformance and reproducibility checks; a real pretrained graph
 * can be dropped in by implementing the same Backbone interface.
 */

import * as tf from '@tensorflow/tfjs'

interface ConvStage {
  filters: number
  kernel: number
  stride: number
}

export interface BackboneSpec {
  name: string
  /** images are bilinearly resized to this square size before inference */
  inputSize: number
  stages: ConvStage[]
  /** pooled feature dimensionality (last stage's filters) */
  dim: number
}

export const ZOO: Record<string, BackboneSpec> = {
  'micro-cnn-64': {
    name: 'micro-cnn-64',
    inputSize: 256,
    stages: [
      { filters: 16, kernel: 7, stride: 4 },
      { filters: 32, kernel: 3, stride: 2 },
      { filters: 64, kernel: 3, stride: 2 },
    ],
    dim: 64,
  },
  'small-cnn-128': {
    name: 'small-cnn-128',
    inputSize: 256,
    stages: [
      { filters: 24, kernel: 7, stride: 4 },
      { filters: 48, kernel: 3, stride: 2 },
      { filters: 96, kernel: 3, stride: 2 },
      { filters: 128, kernel: 3, stride: 2 },
    ],
    dim: 128,
  },
}

/** FNV-1a 32-bit hash: stable seed material from backbone/layer names. */
function fnv1a(text: string): number {
  let h = 0x811c9dc5
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i)
    h = Math.imul(h, 0x01000193)
  }
  return h >>> 0
}

/** mulberry32: tiny deterministic PRNG over uint32 state. */
function mulberry32(seed: number): () => number {
  let state = seed >>> 0
  return () => {
    state = (state + 0x6d2b79f5) >>> 0
    let t = state
    t = Math.imul(t ^ (t >>> 15), t | 1)
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61)
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296
  }
}

function seededKernel(name: string, stage: number, shape: [number, number, number, number]): tf.Tensor4D {
  const rand = mulberry32(fnv1a(`${name}/stage${stage}`))
  const [kh, kw, cin] = shape
  const fanIn = kh * kw * cin
  const limit = Math.sqrt(6 / fanIn) // He-style uniform
  const values = new Float32Array(shape[0] * shape[1] * shape[2] * shape[3])
  for (let i = 0; i < values.length; i++) {
    values[i] = (2 * rand() - 1) * limit
  }
  return tf.tensor4d(values, shape)
}

export class Backbone {
  readonly spec: BackboneSpec
  private kernels: tf.Tensor4D[]

  constructor(spec: BackboneSpec) {
    this.spec = spec
    this.kernels = []
    let channels = 3
    spec.stages.forEach((stage, i) => {
      this.kernels.push(seededKernel(spec.name, i, [stage.kernel, stage.kernel, channels, stage.filters]))
      channels = stage.filters
    })
  }

  /**
   * Pooled features for a batch of images.
   * `batch` is [n, h, w, 3] in [0, 1]; returns an n x dim row-major array.
   */
  embed(batch: tf.Tensor4D): Float32Array {
    const out = tf.tidy(() => {
      let x: tf.Tensor4D = tf.image.resizeBilinear(batch, [this.spec.inputSize, this.spec.inputSize])
      x = tf.sub(x, 0.5) // center inputs
      for (let i = 0; i < this.kernels.length; i++) {
        x = tf.relu(tf.conv2d(x, this.kernels[i], this.spec.stages[i].stride, 'same'))
      }
      return tf.mean(x, [1, 2]) // global average pool -> [n, dim]
    })
    const values = out.dataSync() as Float32Array
    out.dispose()
    return Float32Array.from(values)
  }

  dispose(): void {
    this.kernels.forEach((k) => k.dispose())
  }
}

export function loadBackbone(name: string): Backbone {
  const spec = ZOO[name]
  if (!spec) {
    throw new Error(`unknown backbone ${name}; available: ${Object.keys(ZOO).join(', ')}`)
  }
  return new Backbone(spec)
}
