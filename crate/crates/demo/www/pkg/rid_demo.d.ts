/* tslint:disable */
/* eslint-disable */

/**
 * A defender loaded from checkpoint bytes.
 */
export class Defender {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Defended image, one forward pass.
     */
    defend(pixels: Float32Array): Float32Array;
    /**
     * Budget in `[0, 1]` pixel units times 255.
     */
    eps_255(): number;
    constructor(bytes: Uint8Array);
    /**
     * Side length the defender was trained for.
     */
    res(): number;
}

/**
 * Block-DCT quantisation at `quality` in `[1, 100]`.
 */
export function jpeg(pixels: Float32Array, res: number, quality: number): Float32Array;

/**
 * Identity `seed` under pose `pose_seed` at `res × res`.
 */
export function render_identity(seed: bigint, pose_seed: bigint, res: number): Float32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_defender_free: (a: number, b: number) => void;
    readonly defender_defend: (a: number, b: number, c: number) => [number, number, number, number];
    readonly defender_eps_255: (a: number) => number;
    readonly defender_new: (a: number, b: number) => [number, number, number];
    readonly defender_res: (a: number) => number;
    readonly jpeg: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly render_identity: (a: bigint, b: bigint, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
