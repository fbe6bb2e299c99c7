/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_defender_free: (a: number, b: number) => void;
export const defender_defend: (a: number, b: number, c: number) => [number, number, number, number];
export const defender_eps_255: (a: number) => number;
export const defender_new: (a: number, b: number) => [number, number, number];
export const defender_res: (a: number) => number;
export const jpeg: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const render_identity: (a: bigint, b: bigint, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
